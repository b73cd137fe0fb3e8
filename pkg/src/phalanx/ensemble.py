"""Ensembles of phalanx models, ensembles across metrics, and rank diagnostics.

An ensemble of models (EM) fits one logistic model per phalanx on the full
training data and predicts the plain mean of their probabilities. An
ensemble of models and metrics (EMM) averages EM vectors built from phalanx
sets optimized for different metrics.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .apf import ApfResult, Phalanx
from .data import BlockedDataset
from .errors import DataValidationError, NumericalError
from .learner import FittedModel, ProbabilityVector, fit_logistic, predict_arrays
from .metrics import MetricSpec, hit_curve

__all__ = [
    "EnsembleModel",
    "build_em",
    "predict_em",
    "build_emm",
    "PositiveRanks",
    "RankDiagnostics",
    "rank_diagnostics",
    "within_block_ranks",
    "write_diagnostics_table",
    "write_hit_curve",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnsembleModel:
    """Full-data models for one metric-optimized set of phalanxes."""

    metric: MetricSpec
    phalanxes: tuple[Phalanx, ...]
    models: tuple[FittedModel, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "phalanxes", tuple(self.phalanxes))
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise ValueError("an ensemble needs at least one model")
        if len(self.models) != len(self.phalanxes):
            raise ValueError("one model per phalanx required")
        for ph, m in zip(self.phalanxes, self.models):
            if tuple(ph.variables) != tuple(m.variables):
                raise ValueError(f"model variables {m.variables} do not match phalanx {ph.variables}")

    @property
    def n_features_used(self) -> int:
        """One past the largest feature index any model reads."""
        return max(max(m.variables) for m in self.models) + 1


def build_em(ds: BlockedDataset, apf: ApfResult, ridge: float | None = None) -> EnsembleModel:
    """Fit one logistic model per final phalanx on all rows of ``ds``.

    Args:
        ridge: slope penalty; defaults to the one used by the APF run.

    Raises:
        NumericalError: naming the phalanx whose fit failed.
    """
    if not apf.final_phase3:
        raise ValueError("no final phalanxes to build an ensemble from")
    if not ds.labeled:
        raise DataValidationError("building an ensemble needs labels")
    if ridge is None:
        ridge = apf.params.get("ridge", 1e-6)
    models = []
    for ph in apf.final_phase3:
        try:
            m = fit_logistic(ds, ph.variables, ridge)
        except NumericalError as exc:
            raise NumericalError(f"fit failed for phalanx {list(ph.variables)}: {exc}") from exc
        if not m.converged:
            log.warning("phalanx %s: fit did not converge in %d iterations", list(ph.variables), m.iterations)
        models.append(m)
    prov = {k: apf.params[k] for k in ("seed", "v", "n_perm", "scheme") if k in apf.params}
    prov["ridge"] = ridge
    return EnsembleModel(apf.metric, tuple(apf.final_phase3), tuple(models), prov)


def predict_em(em: EnsembleModel, ds: BlockedDataset) -> ProbabilityVector:
    """Mean of the per-phalanx probability vectors."""
    if em.n_features_used > ds.d_vars:
        raise DataValidationError(f"model uses feature {em.n_features_used - 1} but dataset has {ds.d_vars}")
    total = np.zeros(ds.n_cases)
    for m in em.models:
        total += predict_arrays(m, ds.features)
    return ProbabilityVector(total / len(em.models), provenance=f"EM-{em.metric.id}")


def build_emm(*vectors) -> ProbabilityVector:
    """Componentwise mean of aligned probability vectors.

    Two vectors give the usual APR and RKL combination; more are averaged the
    same way.
    """
    if not vectors:
        raise ValueError("need at least one vector")
    arrays = [np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors]
    n = arrays[0].shape[0]
    for a in arrays[1:]:
        if a.shape[0] != n:
            raise DataValidationError(f"vector lengths differ: {n} vs {a.shape[0]}")
    if len(arrays) == 2:
        # (a + b) / 2 is exactly symmetric in a and b.
        out = (arrays[0] + arrays[1]) / 2.0
    else:
        out = np.sum(arrays, axis=0) / len(arrays)
    tags = [getattr(v, "provenance", "") for v in vectors]
    return ProbabilityVector(out, provenance="mean(" + ",".join(t or "?" for t in tags) + ")")


def within_block_ranks(ds: BlockedDataset, scores) -> np.ndarray:
    """1-based descending rank of every case inside its block.

    A case tied with others gets the last position of its tied group, i.e.
    the number of cases in the block scoring at least as high.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (ds.n_cases,):
        raise DataValidationError(f"scores have shape {scores.shape}, dataset has {ds.n_cases} cases")
    ranks = np.empty(ds.n_cases, dtype=np.int64)
    for rows in ds.groups:
        s = scores[rows]
        asc = np.sort(s)
        ranks[rows] = s.size - np.searchsorted(asc, s, side="left")
    return ranks


@dataclass(frozen=True)
class PositiveRanks:
    block: str
    case: str
    rank_a: float
    rank_b: float
    rank_mean: float


@dataclass(frozen=True)
class RankDiagnostics:
    """Per-positive normalized ranks and win/tie/loss counts by rank bin.

    Bins are ``(edges[k], edges[k+1]]`` with ``edges[0] = 0`` and
    ``edges[-1] = 1``, so together they cover (0, 1]; inner edges are
    inverse-CDF quartiles of the averaged vector's normalized positive ranks,
    which puts at least a quarter of the positives in the first bin even when
    many share the same rank.
    """

    records: tuple[PositiveRanks, ...]
    edges: np.ndarray
    counts: np.ndarray
    a_wins: np.ndarray
    ties: np.ndarray
    b_wins: np.ndarray

    def rows(self):
        """Table rows ``(lo, hi, count, a_wins, ties, b_wins)``."""
        for k in range(len(self.counts)):
            yield (float(self.edges[k]), float(self.edges[k + 1]), int(self.counts[k]),
                   int(self.a_wins[k]), int(self.ties[k]), int(self.b_wins[k]))


def _type1_quantile(sorted_values: np.ndarray, p: float) -> float:
    k = max(math.ceil(len(sorted_values) * p), 1)
    return float(sorted_values[k - 1])


def rank_diagnostics(ds: BlockedDataset, scores_a, scores_b, bins: int = 4) -> RankDiagnostics:
    """Compare where two score vectors place each positive.

    Ranks are normalized by block size so they fall in (0, 1]. A positive
    counts as an a-win when ``scores_a`` ranks it strictly higher (smaller
    rank) than ``scores_b``.
    """
    if not ds.labeled:
        raise DataValidationError("rank diagnostics need labels")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataValidationError(f"score vectors are misaligned: {a.shape} vs {b.shape}")
    mean = build_emm(a, b).values
    sizes = np.empty(ds.n_cases)
    for rows in ds.groups:
        sizes[rows] = rows.size
    ra = within_block_ranks(ds, a) / sizes
    rb = within_block_ranks(ds, b) / sizes
    rm = within_block_ranks(ds, mean) / sizes

    pos = np.flatnonzero(ds.labels == 1)
    keys = ds.case_keys()
    records = tuple(PositiveRanks(str(ds.block_ids[i]), str(keys[i]), float(ra[i]), float(rb[i]), float(rm[i]))
                    for i in pos)
    srt = np.sort(rm[pos])
    inner = [_type1_quantile(srt, k / bins) for k in range(1, bins)] if srt.size else [0.0] * (bins - 1)
    edges = np.array([0.0, *inner, 1.0])
    # Bin k holds ranks in (edges[k], edges[k+1]].
    which = np.clip(np.searchsorted(edges, rm[pos], side="left") - 1, 0, bins - 1)
    counts = np.bincount(which, minlength=bins)
    a_wins = np.bincount(which[ra[pos] < rb[pos]], minlength=bins)
    b_wins = np.bincount(which[rb[pos] < ra[pos]], minlength=bins)
    ties = np.bincount(which[ra[pos] == rb[pos]], minlength=bins)
    return RankDiagnostics(records, edges, counts, a_wins, ties, b_wins)


def write_diagnostics_table(diag: RankDiagnostics, path, sep: str = "\t") -> None:
    """Delimited table with columns bin range, count, a-wins, ties, b-wins."""
    with open(path, "w") as fh:
        fh.write(sep.join(["bin", "count", "a_wins", "ties", "b_wins"]) + "\n")
        for lo, hi, n, aw, t, bw in diag.rows():
            fh.write(sep.join([f"({lo:.6g},{hi:.6g}]", str(n), str(aw), str(t), str(bw)]) + "\n")


def write_hit_curve(labels, scores, path, sep: str = "\t") -> None:
    """Two columns: rank ``t`` and positives among the top ``t``."""
    curve = hit_curve(labels, scores)
    with open(path, "w") as fh:
        fh.write(f"t{sep}hits\n")
        for t, h in curve.rows():
            fh.write(f"{t}{sep}{h}\n")
