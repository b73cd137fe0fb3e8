"""Command-line front end: train, predict, eval, diagnostics and simulate.

Exit codes: 0 success, 1 usage error, 2 invalid input data, 3 numerical
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import synthetic
from .apf import Phalanx, run_apf, write_trace
from .data import BlockedDataset, Schema, load_dataset, write_dataset, KDD_TRAIN
from .ensemble import (EnsembleModel, build_em, build_emm, predict_em, rank_diagnostics,
                       write_diagnostics_table, write_hit_curve)
from .errors import DataValidationError, NumericalError, PhalanxError
from .learner import FittedModel
from .metrics import APR, RKL, MetricSpec, metric_spec, per_block

__all__ = [
    "main",
    "build_parser",
    "ModelDocument",
    "em_to_dict",
    "em_from_dict",
    "dump_model",
    "load_model",
    "format_probability",
]

log = logging.getLogger("phalanx")

FORMAT = "phalanx-model"
VERSION = 1

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _StageFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@contextmanager
def stage(name: str):
    """Turn library errors into an exit code and a message naming ``name``."""
    try:
        yield
    except NumericalError as exc:
        raise _StageFailure(EXIT_NUMERIC, f"{name}: {exc}") from exc
    except (PhalanxError, OSError, ValueError, KeyError) as exc:
        raise _StageFailure(EXIT_DATA, f"{name}: {exc}") from exc


# ---------------------------------------------------------------- documents

def _f(x: float) -> str:
    return format(float(x), ".17g")


def em_to_dict(em: EnsembleModel) -> dict:
    return {
        "metric": {"id": em.metric.id, "direction": em.metric.direction, "alpha": _f(em.metric.alpha)},
        "provenance": em.provenance,
        "phalanxes": [
            {
                "variables": list(ph.variables),
                "cv_score": _f(ph.cv_score),
                "intercept": _f(m.intercept),
                "coefficients": [_f(c) for c in m.coefficients],
                "converged": m.converged,
                "iterations": m.iterations,
                "pinned": list(m.pinned),
            }
            for ph, m in zip(em.phalanxes, em.models)
        ],
    }


def em_from_dict(doc: dict) -> EnsembleModel:
    md = doc["metric"]
    metric = MetricSpec(md["id"], md["direction"], float(md["alpha"]))
    phalanxes, models = [], []
    for rec in doc["phalanxes"]:
        variables = tuple(int(v) for v in rec["variables"])
        phalanxes.append(Phalanx(variables, float(rec["cv_score"])))
        models.append(FittedModel(float(rec["intercept"]), np.array([float(c) for c in rec["coefficients"]]),
                                  variables, bool(rec["converged"]), int(rec["iterations"]),
                                  tuple(rec.get("pinned", ()))))
    return EnsembleModel(metric, tuple(phalanxes), tuple(models), dict(doc.get("provenance", {})))


class ModelDocument:
    """A saved EM, or an EMM made of two EMs, plus the training feature count."""

    def __init__(self, members: list[EnsembleModel], d_vars: int):
        if len(members) not in (1, 2):
            raise ValueError("a model document holds one EM or two for an EMM")
        self.members = list(members)
        self.d_vars = int(d_vars)

    @property
    def kind(self) -> str:
        return "em" if len(self.members) == 1 else "emm"

    def to_dict(self) -> dict:
        doc = {"format": FORMAT, "version": VERSION, "kind": self.kind, "d_vars": self.d_vars}
        if self.kind == "em":
            doc["model"] = em_to_dict(self.members[0])
        else:
            doc["models"] = [em_to_dict(m) for m in self.members]
        return doc

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> ModelDocument:
        if doc.get("format") != FORMAT:
            raise DataValidationError(f"not a model document (format {doc.get('format')!r})")
        if doc.get("version") != VERSION:
            raise DataValidationError(f"unsupported model document version {doc.get('version')!r}; "
                                      f"this build reads version {VERSION}")
        kind = doc.get("kind")
        if kind == "em":
            members = [em_from_dict(doc["model"])]
        elif kind == "emm":
            members = [em_from_dict(d) for d in doc["models"]]
        else:
            raise DataValidationError(f"unknown model kind {kind!r}")
        return cls(members, doc["d_vars"])

    def predict(self, ds: BlockedDataset) -> np.ndarray:
        if ds.d_vars != self.d_vars:
            raise DataValidationError(f"model was trained on {self.d_vars} features, dataset has {ds.d_vars}")
        vectors = [predict_em(m, ds) for m in self.members]
        return vectors[0].values if len(vectors) == 1 else build_emm(*vectors).values


def dump_model(doc: ModelDocument, path) -> None:
    Path(path).write_text(doc.dumps())


def load_model(path) -> ModelDocument:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"{path}: not valid JSON ({exc})") from None
    return ModelDocument.from_dict(raw)


# ------------------------------------------------------------- predictions

def format_probability(p: float) -> str:
    return f"{p:.6f}"


def write_predictions(ds: BlockedDataset, probs: np.ndarray, path) -> None:
    cases = ds.case_keys()
    with open(path, "w") as fh:
        for b, c, p in zip(ds.block_ids, cases, probs):
            fh.write(f"{b} {c} {format_probability(p)}\n")


def rounded(probs: np.ndarray) -> np.ndarray:
    """Probabilities as they read back from a predictions file."""
    return np.array([float(format_probability(p)) for p in probs])


def read_predictions(path, ds: BlockedDataset) -> np.ndarray:
    """Read a predictions file and check it lines up with ``ds`` row by row."""
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.strip():
                rows.append((lineno, raw.split()))
    if len(rows) != ds.n_cases:
        raise DataValidationError(f"{path}: {len(rows)} predictions for {ds.n_cases} cases")
    cases = ds.case_keys()
    out = np.empty(ds.n_cases)
    for i, (lineno, toks) in enumerate(rows):
        if len(toks) != 3:
            raise DataValidationError(f"{path}: line {lineno}: expected block, case and probability")
        if toks[0] != str(ds.block_ids[i]) or toks[1] != str(cases[i]):
            raise DataValidationError(f"{path}: line {lineno}: ({toks[0]}, {toks[1]}) does not match "
                                      f"dataset row ({ds.block_ids[i]}, {cases[i]})")
        try:
            out[i] = float(toks[2])
        except ValueError:
            raise DataValidationError(f"{path}: line {lineno}: bad probability {toks[2]!r}") from None
    if not np.all(np.isfinite(out)):
        raise DataValidationError(f"{path}: non-finite probability")
    return out


# ----------------------------------------------------------------- commands

def _metrics_for(name: str, alpha: float | None) -> list[MetricSpec]:
    if name == "emm":
        if alpha is None:
            return [APR, RKL]
        # One level given for both: APR uses it, RKL its mirror.
        return [APR.with_alpha(alpha), RKL.with_alpha(1.0 - alpha)]
    return [metric_spec(name, alpha)]


def _safe_name(block: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", block)


def cmd_train(args) -> int:
    with stage("loading training data"):
        ds = load_dataset(args.train, args.schema or KDD_TRAIN)
        if not ds.labeled:
            raise DataValidationError("training data needs a label column in the schema")
    members, records, counts = [], [], []
    for metric in _metrics_for(args.metric, args.alpha):
        with stage(f"phalanx formation ({metric.id})"):
            res = run_apf(ds, metric, v=args.folds, n_perm=args.n_perm, seed=args.seed, ridge=args.ridge,
                          jobs=args.jobs, scheme=args.scheme)
        if res.degenerate:
            log.warning("%s: every variable failed the filter; kept the best single variable", metric.id)
        with stage(f"final fits ({metric.id})"):
            em = build_em(ds, res, args.ridge)
        prov = dict(em.provenance, counts=res.counts)
        members.append(EnsembleModel(em.metric, em.phalanxes, em.models, prov))
        records.extend({"metric": metric.id, **r} for r in res.trace)
        counts.append((metric.id, res.counts))

    doc = ModelDocument(members, ds.d_vars)
    with stage("writing model"):
        dump_model(doc, args.model)
    if args.trace:
        with stage("writing trace"):
            write_trace(records, args.trace)

    print(f"{'metric':<8}{'d':>6}{'s':>6}{'c':>6}{'p':>6}")
    for mid, c in counts:
        print(f"{mid:<8}{c['d']:>6}{c['s']:>6}{c['c']:>6}{c['p']:>6}")
    for em in members:
        groups = " ".join("{" + ",".join(str(v) for v in ph.variables) + "}" for ph in em.phalanxes)
        print(f"{em.metric.id} phalanxes: {groups}")
    return EXIT_OK


def cmd_predict(args) -> int:
    with stage("loading model"):
        doc = load_model(args.model)
    with stage("loading data"):
        ds = load_dataset(args.test, args.schema or Schema(0, 1, None), require_positives=False)
    with stage("predicting"):
        probs = doc.predict(ds)
    with stage("writing predictions"):
        write_predictions(ds, probs, args.out)
    return EXIT_OK


def _report(ds: BlockedDataset, probs: np.ndarray, skip: bool):
    values = {}
    for name in ("APR", "RKL", "TOP1"):
        values[name] = per_block(ds, probs, name, skip_empty=skip)
    return values


def cmd_eval(args) -> int:
    if (args.predictions is None) == (args.model is None):
        raise _StageFailure(EXIT_USAGE, "eval needs exactly one of --predictions or --model")
    with stage("loading data"):
        ds = load_dataset(args.test, args.schema or KDD_TRAIN, require_positives=not args.skip_empty_blocks)
        if not ds.labeled:
            raise DataValidationError("evaluation needs a label column in the schema")
    with stage("loading predictions"):
        if args.model is not None:
            # Same rounding as a predictions file, so both routes agree exactly.
            probs = rounded(load_model(args.model).predict(ds))
        else:
            probs = read_predictions(args.predictions[0], ds)
    with stage("evaluating"):
        values = _report(ds, probs, args.skip_empty_blocks)
    empty = [str(b) for b, v in zip(ds.blocks, values["APR"]) if np.isnan(v)]
    if empty:
        print(f"excluded {len(empty)} block(s) without positives: {' '.join(empty)}", file=sys.stderr)
    keep = ~np.isnan(values["APR"])
    if not keep.any():
        raise _StageFailure(EXIT_DATA, "evaluating: no block has a positive case")
    for name in ("APR", "RKL", "TOP1"):
        print(f"{name:<5} {values[name][keep].mean():.6f}")
    print(f"blocks {int(keep.sum())}")

    with stage("writing per-block values"):
        if args.per_block:
            with open(args.per_block, "w") as fh:
                fh.write("block\tAPR\tRKL\tTOP1\n")
                for k, b in enumerate(ds.blocks):
                    if keep[k]:
                        fh.write(f"{b}\t{values['APR'][k]:.6f}\t{int(values['RKL'][k])}\t"
                                 f"{int(values['TOP1'][k])}\n")
        if args.hit_curves:
            os.makedirs(args.hit_curves, exist_ok=True)
            for k, rows in enumerate(ds.groups):
                if keep[k]:
                    write_hit_curve(ds.labels[rows], probs[rows],
                                    Path(args.hit_curves) / f"{_safe_name(str(ds.blocks[k]))}.tsv")
    return EXIT_OK


def cmd_diagnostics(args) -> int:
    with stage("loading data"):
        ds = load_dataset(args.test, args.schema or KDD_TRAIN, require_positives=False)
        if not ds.labeled:
            raise DataValidationError("diagnostics need a label column in the schema")
    with stage("loading predictions"):
        a = read_predictions(args.predictions[0], ds)
        b = read_predictions(args.predictions[1], ds)
    with stage("computing diagnostics"):
        diag = rank_diagnostics(ds, a, b, bins=args.bins)
    with stage("writing diagnostics"):
        if args.out:
            write_diagnostics_table(diag, args.out)
        if args.hit_curves:
            for tag, scores in (("a", a), ("b", b)):
                d = Path(args.hit_curves) / tag
                d.mkdir(parents=True, exist_ok=True)
                for k, rows in enumerate(ds.groups):
                    if ds.labels[rows].any():
                        write_hit_curve(ds.labels[rows], scores[rows], d / f"{_safe_name(str(ds.blocks[k]))}.tsv")
    print(f"{'bin':<24}{'count':>7}{'a_wins':>8}{'ties':>7}{'b_wins':>8}")
    for lo, hi, n, aw, t, bw in diag.rows():
        print(f"{f'({lo:.5f}, {hi:.5f}]':<24}{n:>7}{aw:>8}{t:>7}{bw:>8}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.kind == "planted":
        ds = synthetic.planted_pairs(args.seed)
    else:
        ds, _ = synthetic.two_regime(args.seed)
    with stage("writing data"):
        write_dataset(ds, args.out, KDD_TRAIN)
    print(f"wrote {ds.n_cases} cases in {len(ds.blocks)} blocks with {ds.d_vars} features to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _schema(text: str) -> Schema:
    try:
        return Schema.parse(text)
    except (ValueError, TypeError, OSError) as exc:
        raise argparse.ArgumentTypeError(f"bad schema {text!r}: {exc}") from None


def _alpha(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("alpha must lie in [0, 1]")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="phalanx", description="Phalanx formation and ensembles for ranking rare cases in blocked data.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    schema_help = ("column roles: a preset (kdd-train, kdd-test), a JSON file, or key=value pairs "
                   "such as block=0,case=1,label=2,delimiter=comma")

    t = sub.add_parser("train", help="form phalanxes and fit the ensemble")
    t.add_argument("--train", required=True, help="labeled training file")
    t.add_argument("--schema", type=_schema, help=schema_help + " (default kdd-train)")
    t.add_argument("--metric", choices=("apr", "rkl", "emm"), default="emm")
    t.add_argument("--seed", type=int, default=0, help="seed for folds and permutations")
    t.add_argument("--folds", type=_positive_int, default=10)
    t.add_argument("--n-perm", type=_positive_int, default=2000)
    t.add_argument("--alpha", type=_alpha, help="reference quantile for the variable filter "
                   "(default 0.95 for apr, 0.05 for rkl; with emm, rkl uses 1 - alpha)")
    t.add_argument("--ridge", type=float, default=1e-6)
    t.add_argument("--jobs", type=_positive_int, default=1, help="worker threads; never changes results")
    t.add_argument("--scheme", choices=("block", "global"), default="block",
                   help="label permutation scheme for the reference distribution")
    t.add_argument("--model", required=True, help="output model document (JSON)")
    t.add_argument("--trace", help="output trace (JSON lines)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("predict", help="score a dataset with a saved model")
    r.add_argument("--model", required=True)
    r.add_argument("--test", required=True, help="data file to score")
    r.add_argument("--schema", type=_schema, help=schema_help + " (default block=0,case=1)")
    r.add_argument("--out", required=True, help="predictions file: block, case, probability")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="block-averaged APR, RKL and TOP1")
    e.add_argument("--test", required=True, help="labeled data file")
    e.add_argument("--schema", type=_schema, help=schema_help + " (default kdd-train)")
    src = e.add_mutually_exclusive_group()
    src.add_argument("--predictions", nargs=1, help="predictions file from 'predict'")
    src.add_argument("--model", help="score with a saved model instead")
    e.add_argument("--skip-empty-blocks", action="store_true", help="exclude blocks without positives")
    e.add_argument("--per-block", help="write per-block values here")
    e.add_argument("--hit-curves", help="directory for one hit-curve file per block")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnostics", help="compare where two score files rank each positive")
    d.add_argument("--test", required=True, help="labeled data file")
    d.add_argument("--schema", type=_schema, help=schema_help + " (default kdd-train)")
    d.add_argument("--predictions", nargs=2, required=True, metavar=("A", "B"))
    d.add_argument("--bins", type=_positive_int, default=4)
    d.add_argument("--out", help="write the win/tie/loss table here")
    d.add_argument("--hit-curves", help="directory for per-block hit curves of A and B")
    d.set_defaults(func=cmd_diagnostics)

    s = sub.add_parser("simulate", help="write a synthetic labeled dataset (kdd-train layout)")
    s.add_argument("--kind", choices=("planted", "two-regime"), default="planted")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _StageFailure as exc:
        print(f"phalanx {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
