"""Algorithm of phalanx formation.

Three phases, each driven by cross-validated values of one ranking metric:

1. drop variables that are weak alone, weak when fit jointly with any other
   variable, and weak when ensembled with any other variable;
2. greedily merge groups whose joint model beats both members and their
   ensemble;
3. greedily drop candidate phalanxes that do not improve the ensemble with
   some other phalanx.

Every model is judged by the block-averaged metric of its out-of-fold
probabilities on one shared block-level fold assignment. Values are cached by
sorted variable set, so a group is fit once per run however many pairs it
takes part in.
"""
from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import BlockedDataset, FoldAssignment, make_folds
from .errors import NumericalError
from .learner import cv_probabilities
from .metrics import MetricSpec, ReferenceDistribution, block_average, permutation_reference

__all__ = [
    "Phalanx",
    "PairScores",
    "ApfResult",
    "GroupEvaluator",
    "filter_variables",
    "merge_phase",
    "filter_phalanxes",
    "run_apf",
    "write_trace",
    "read_trace",
]

log = logging.getLogger(__name__)

Group = tuple[int, ...]


@dataclass(frozen=True)
class Phalanx:
    variables: Group
    cv_score: float

    def __post_init__(self):
        if not self.variables:
            raise ValueError("a phalanx needs at least one variable")
        object.__setattr__(self, "variables", tuple(sorted(int(v) for v in self.variables)))


@dataclass(frozen=True)
class PairScores:
    """Individual, joint and ensemble metric values for two groups."""

    a_i: float
    a_j: float
    a_ij: float
    a_ij_bar: float

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.a_i, self.a_j, self.a_ij, self.a_ij_bar))


@dataclass
class ApfResult:
    metric: MetricSpec
    survivors_phase1: list[int]
    candidates_phase2: list[Phalanx]
    final_phase3: list[Phalanx]
    trace: list[dict]
    reference: ReferenceDistribution
    folds: FoldAssignment
    degenerate: bool = False
    params: dict = field(default_factory=dict)

    @property
    def counts(self) -> dict[str, int]:
        """Phase counts: total and post-filter variables, candidate and final phalanxes."""
        return {
            "d": int(self.params.get("d_vars", 0)),
            "s": len(self.survivors_phase1),
            "c": len(self.candidates_phase2),
            "p": len(self.final_phase3),
        }


def _key(variables: Iterable[int]) -> Group:
    return tuple(sorted(set(int(v) for v in variables)))


class GroupEvaluator:
    """Memoized out-of-fold probabilities and metric values per variable set.

    Entries are pure functions of the variable set, so concurrent inserts of
    the same key store identical values and evaluation order never matters.
    """

    def __init__(self, ds: BlockedDataset, folds: FoldAssignment, metric: MetricSpec,
                 ridge: float = 1e-6, jobs: int = 1):
        self.ds = ds
        self.folds = folds
        self.metric = metric
        self.ridge = ridge
        self.jobs = max(1, int(jobs))
        self._cache: dict[Group, tuple[np.ndarray | None, float]] = {}
        self._lock = threading.Lock()

    def _compute(self, key: Group) -> tuple[np.ndarray | None, float]:
        try:
            probs = np.asarray(cv_probabilities(self.ds, key, self.folds, self.ridge))
        except NumericalError as exc:
            log.warning("fit failed for variables %s: %s", key, exc)
            return None, math.nan
        return probs, block_average(self.ds, probs, self.metric)

    def _get(self, key: Group) -> tuple[np.ndarray | None, float]:
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        value = self._compute(key)
        with self._lock:
            return self._cache.setdefault(key, value)

    def prefetch(self, groups: Iterable[Iterable[int]]) -> None:
        keys = list(dict.fromkeys(_key(g) for g in groups))
        with self._lock:
            missing = [k for k in keys if k not in self._cache]
        if not missing:
            return
        if self.jobs == 1 or len(missing) == 1:
            for k in missing:
                self._get(k)
            return
        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            list(pool.map(self._get, missing))

    def probs(self, group: Iterable[int]) -> np.ndarray | None:
        return self._get(_key(group))[0]

    def score(self, group: Iterable[int]) -> float:
        return self._get(_key(group))[1]

    def ensemble_score(self, gi: Iterable[int], gj: Iterable[int]) -> float:
        pi, pj = self.probs(gi), self.probs(gj)
        if pi is None or pj is None:
            return math.nan
        return block_average(self.ds, (pi + pj) / 2.0, self.metric)

    def pair(self, gi: Group, gj: Group) -> PairScores:
        return PairScores(self.score(gi), self.score(gj), self.score(gi + gj), self.ensemble_score(gi, gj))


def _num(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def _pair_record(phase: int, iteration: int, gi: Group, gj: Group, ps: PairScores,
                 criterion: float, action: str, **extra) -> dict:
    rec = {
        "phase": phase,
        "iteration": iteration,
        "pair": [list(gi), list(gj)],
        "criterion": _num(criterion),
        "action": action,
        "a_i": _num(ps.a_i),
        "a_j": _num(ps.a_j),
        "a_ij": _num(ps.a_ij),
        "a_ij_bar": _num(ps.a_ij_bar),
    }
    rec.update(extra)
    return rec


def filter_variables(
    ds: BlockedDataset,
    folds: FoldAssignment,
    metric: MetricSpec,
    reference: ReferenceDistribution,
    ridge: float = 1e-6,
    *,
    evaluator: GroupEvaluator | None = None,
    variables: Sequence[int] | None = None,
) -> tuple[list[int], list[dict]]:
    """Phase 1: keep variables that are strong alone, jointly or in an ensemble.

    All decisions are made against the full starting set and applied at once.
    When maximizing, variable ``i`` is kept iff for some ``j != i``::

        max(a_i, a_med + a_ij - a_j, a_med + a_ij_bar - a_j) >= a_cut

    and symmetrically with ``min`` / ``<=`` when minimizing.
    """
    ev = evaluator or GroupEvaluator(ds, folds, metric, ridge)
    variables = list(range(ds.d_vars)) if variables is None else [int(v) for v in variables]
    cut, med = reference.cut, reference.median
    sign = 1.0 if metric.maximize else -1.0

    ev.prefetch([(i,) for i in variables])
    ev.prefetch([(i, j) for a, i in enumerate(variables) for j in variables[a + 1:]])

    kept: list[int] = []
    trace: list[dict] = []
    for i in variables:
        a_i = ev.score((i,))
        best, best_j, best_term = sign * a_i if math.isfinite(a_i) else -math.inf, None, "individual"
        for j in variables:
            if j == i:
                continue
            a_j = ev.score((j,))
            a_ij = ev.score((i, j))
            a_bar = ev.ensemble_score((i,), (j,))
            for term, val in (("joint", med + a_ij - a_j), ("ensemble", med + a_bar - a_j)):
                if math.isfinite(val) and sign * val > best:
                    best, best_j, best_term = sign * val, j, term
        keep = best >= sign * cut
        value = sign * best if math.isfinite(best) else math.nan
        trace.append({
            "phase": 1,
            "iteration": 0,
            "pair": [[i], [best_j]] if best_j is not None else [[i]],
            "criterion": _num(value),
            "action": "keep" if keep else "drop",
            "term": best_term,
            "cut": cut,
            "median": med,
        })
        if keep:
            kept.append(i)
    return kept, trace


def _merge_criterion(metric: MetricSpec, ps: PairScores) -> float:
    if not ps.finite() or ps.a_ij <= 0:
        return math.nan
    if metric.maximize:
        return max(ps.a_ij_bar, ps.a_i, ps.a_j) / ps.a_ij
    return min(ps.a_ij_bar, ps.a_i, ps.a_j) / ps.a_ij


def _sorted_groups(groups: Iterable[Iterable[int]]) -> list[Group]:
    return sorted((_key(g) for g in groups), key=lambda g: g[0])


def merge_phase(
    ds: BlockedDataset,
    folds: FoldAssignment,
    survivors: Sequence[int],
    metric: MetricSpec,
    ridge: float = 1e-6,
    *,
    evaluator: GroupEvaluator | None = None,
) -> tuple[list[Phalanx], list[dict]]:
    """Phase 2: agglomerate singleton groups while the joint model wins.

    Each iteration scores every current pair and takes the extremal one
    (smallest ``max(a_ij_bar, a_i, a_j) / a_ij`` when maximizing, largest
    ``min(r_ij_bar, r_i, r_j) / r_ij`` when minimizing). It is merged only
    if that ratio is strictly below (above) 1. Ties go to the pair whose
    groups have the smallest leading variables.
    """
    if not survivors:
        raise ValueError("merge phase needs at least one variable")
    ev = evaluator or GroupEvaluator(ds, folds, metric, ridge)
    groups = _sorted_groups((v,) for v in survivors)
    trace: list[dict] = []
    iteration = 0
    while len(groups) > 1:
        iteration += 1
        pairs = [(gi, gj) for a, gi in enumerate(groups) for gj in groups[a + 1:]]
        ev.prefetch(list(groups) + [gi + gj for gi, gj in pairs])
        best = None
        for gi, gj in pairs:
            ps = ev.pair(gi, gj)
            m = _merge_criterion(metric, ps)
            if math.isnan(m):
                trace.append(_pair_record(2, iteration, gi, gj, ps, m, "ineligible"))
                continue
            if best is None or (m < best[0] if metric.maximize else m > best[0]):
                best = (m, gi, gj, ps)
        if best is None:
            trace.append({"phase": 2, "iteration": iteration, "pair": None, "criterion": None,
                          "action": "stop"})
            break
        m, gi, gj, ps = best
        merge = m < 1.0 if metric.maximize else m > 1.0
        trace.append(_pair_record(2, iteration, gi, gj, ps, m, "merge" if merge else "stop"))
        if not merge:
            break
        groups = _sorted_groups([g for g in groups if g not in (gi, gj)] + [gi + gj])
    result = [Phalanx(g, ev.score(g)) for g in groups]
    trace.append({"phase": 2, "iteration": iteration, "action": "result",
                  "groups": [list(p.variables) for p in result],
                  "scores": [_num(p.cv_score) for p in result]})
    return result, trace


def _filter_criterion(metric: MetricSpec, ps: PairScores) -> float:
    if not (math.isfinite(ps.a_i) and math.isfinite(ps.a_j) and math.isfinite(ps.a_ij_bar)):
        return math.nan
    divisor = max(ps.a_i, ps.a_j) if metric.maximize else min(ps.a_i, ps.a_j)
    if not divisor > 0:
        return math.nan
    return ps.a_ij_bar / divisor


def filter_phalanxes(
    ds: BlockedDataset,
    folds: FoldAssignment,
    candidates: Sequence[Phalanx],
    metric: MetricSpec,
    ridge: float = 1e-6,
    *,
    evaluator: GroupEvaluator | None = None,
) -> tuple[list[Phalanx], list[dict]]:
    """Phase 3: drop candidates whose ensemble with another does not help.

    When maximizing, the pair with the smallest ``a_ij_bar / max(a_i, a_j)``
    is examined; if that ratio is at most 1 the member with the smaller
    score goes (on a tie, the one with the larger leading variable). The
    minimizing direction takes the largest ``r_ij_bar / min(r_i, r_j)`` and
    drops the larger-``r`` member while the ratio is at least 1.
    """
    if not candidates:
        raise ValueError("no candidate phalanxes")
    ev = evaluator or GroupEvaluator(ds, folds, metric, ridge)
    groups = _sorted_groups(p.variables for p in candidates)
    trace: list[dict] = []
    iteration = 0
    while len(groups) > 1:
        iteration += 1
        ev.prefetch(groups)
        best = None
        for a, gi in enumerate(groups):
            for gj in groups[a + 1:]:
                ps = PairScores(ev.score(gi), ev.score(gj), math.nan, ev.ensemble_score(gi, gj))
                f = _filter_criterion(metric, ps)
                if math.isnan(f):
                    trace.append(_pair_record(3, iteration, gi, gj, ps, f, "ineligible"))
                    continue
                if best is None or (f < best[0] if metric.maximize else f > best[0]):
                    best = (f, gi, gj, ps)
        if best is None:
            trace.append({"phase": 3, "iteration": iteration, "pair": None, "criterion": None,
                          "action": "stop"})
            break
        f, gi, gj, ps = best
        drop = f <= 1.0 if metric.maximize else f >= 1.0
        if not drop:
            trace.append(_pair_record(3, iteration, gi, gj, ps, f, "stop"))
            break
        if ps.a_i == ps.a_j:
            weaker = gj  # larger leading variable
        elif metric.better(ps.a_i, ps.a_j):
            weaker = gj
        else:
            weaker = gi
        trace.append(_pair_record(3, iteration, gi, gj, ps, f, "drop", dropped=list(weaker)))
        groups = [g for g in groups if g != weaker]
    result = [Phalanx(g, ev.score(g)) for g in groups]
    trace.append({"phase": 3, "iteration": iteration, "action": "result",
                  "groups": [list(p.variables) for p in result],
                  "scores": [_num(p.cv_score) for p in result]})
    return result, trace


def run_apf(
    ds: BlockedDataset,
    metric: MetricSpec,
    v: int = 10,
    n_perm: int = 2000,
    seed: int = 0,
    ridge: float = 1e-6,
    *,
    jobs: int = 1,
    scheme: str = "block",
) -> ApfResult:
    """Run all three phases; the result is a deterministic function of the arguments."""
    folds = make_folds(ds, v, seed)
    reference = permutation_reference(ds, metric, n_perm, seed, scheme=scheme)
    ev = GroupEvaluator(ds, folds, metric, ridge, jobs)

    survivors, trace = filter_variables(ds, folds, metric, reference, ridge, evaluator=ev)
    degenerate = False
    if not survivors:
        scores = [ev.score((i,)) for i in range(ds.d_vars)]
        oriented = [(s if metric.maximize else -s) if math.isfinite(s) else -math.inf for s in scores]
        best = int(np.argmax(oriented))
        survivors = [best]
        degenerate = True
        trace.append({"phase": 1, "iteration": 0, "pair": [[best]], "criterion": _num(scores[best]),
                      "action": "retain-best"})
    trace.append({"phase": 1, "iteration": 0, "action": "result", "survivors": list(survivors)})

    candidates, t2 = merge_phase(ds, folds, survivors, metric, ridge, evaluator=ev)
    final, t3 = filter_phalanxes(ds, folds, candidates, metric, ridge, evaluator=ev)
    params = {"v": v, "n_perm": n_perm, "seed": seed, "ridge": ridge, "scheme": scheme,
              "d_vars": ds.d_vars}
    return ApfResult(metric, survivors, candidates, final, trace + t2 + t3, reference, folds,
                     degenerate, params)


def write_trace(records: Iterable[dict], path, **extra) -> None:
    """Write trace records as JSON lines, optionally tagging each with ``extra`` fields."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps({**extra, **rec}) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
