"""Block-wise ranking metrics, hit curves and permutation reference distributions.

Cases are ranked by descending score. Ties never help: inside a group of
equal scores, negatives are placed ahead of positives. Under that ordering

* APR is the mean over positives of ``h_t / t`` at each positive's position,
* RKL is the 1-based position of the last positive, which is the last
  position of its tied group,
* TOP1 is 1 iff the top position holds a positive, i.e. iff every case tied
  at the maximum score is positive.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .data import BlockedDataset
from .errors import DataValidationError, UndefinedMetricError

__all__ = [
    "MetricSpec",
    "APR",
    "RKL",
    "TOP1",
    "metric_spec",
    "pessimistic_order",
    "apr_block",
    "rkl_block",
    "top1_block",
    "per_block",
    "block_average",
    "HitCurve",
    "hit_curve",
    "ReferenceDistribution",
    "permutation_reference",
]

_DIRECTIONS = {"APR": "maximize", "TOP1": "maximize", "RKL": "minimize"}


@dataclass(frozen=True)
class MetricSpec:
    """A ranking metric with its optimization direction and reference quantile."""

    id: str
    direction: str
    alpha: float

    def __post_init__(self):
        if self.id not in _DIRECTIONS:
            raise ValueError(f"unknown metric {self.id!r}")
        if self.direction != _DIRECTIONS[self.id]:
            raise ValueError(f"{self.id} must be optimized in direction {_DIRECTIONS[self.id]!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @property
    def maximize(self) -> bool:
        return self.direction == "maximize"

    def better(self, a: float, b: float) -> bool:
        """True if ``a`` is strictly better than ``b``."""
        return a > b if self.maximize else a < b

    def with_alpha(self, alpha: float) -> MetricSpec:
        return MetricSpec(self.id, self.direction, alpha)


def metric_spec(name: str, alpha: float | None = None) -> MetricSpec:
    """Spec for ``name`` with the default cut (0.95 when maximizing, 0.05 when minimizing)."""
    key = name.upper()
    if key not in _DIRECTIONS:
        raise ValueError(f"unknown metric {name!r}; expected one of {sorted(_DIRECTIONS)}")
    direction = _DIRECTIONS[key]
    if alpha is None:
        alpha = 0.95 if direction == "maximize" else 0.05
    return MetricSpec(key, direction, alpha)


APR = metric_spec("APR")
RKL = metric_spec("RKL")
TOP1 = metric_spec("TOP1")


def pessimistic_order(labels, scores) -> np.ndarray:
    """Indices sorting cases by descending score, negatives first within ties."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError(f"labels and scores must be 1-d of equal length, got {labels.shape} and {scores.shape}")
    return np.lexsort((labels, -scores))


def _ranked_labels(labels, scores) -> np.ndarray:
    labels = np.asarray(labels)
    ranked = labels[pessimistic_order(labels, scores)].astype(np.int64)
    if not ranked.any():
        raise UndefinedMetricError("block has no positive cases")
    return ranked


# Kernels on rows of already-ranked 0/1 labels; shape (..., n).

def _apr_ranked(ranked: np.ndarray) -> np.ndarray:
    hits = np.cumsum(ranked, axis=-1)
    t = np.arange(1, ranked.shape[-1] + 1)
    return (ranked * hits / t).sum(axis=-1) / hits[..., -1]


def _rkl_ranked(ranked: np.ndarray) -> np.ndarray:
    n = ranked.shape[-1]
    return n - np.argmax(ranked[..., ::-1], axis=-1)


def _top1_ranked(ranked: np.ndarray) -> np.ndarray:
    return ranked[..., 0].astype(np.float64)


_KERNELS = {"APR": _apr_ranked, "RKL": _rkl_ranked, "TOP1": _top1_ranked}


def apr_block(labels, scores) -> float:
    """Average precision of one block.

    >>> apr_block([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.6])  # (1/1 + 2/3) / 2
    0.8333333333333333
    """
    return float(_apr_ranked(_ranked_labels(labels, scores)))


def rkl_block(labels, scores) -> int:
    """Rank of the last positive; a tie is charged at the end of its group."""
    return int(_rkl_ranked(_ranked_labels(labels, scores)))


def top1_block(labels, scores) -> int:
    """1 if every case tied for the top score is positive, else 0."""
    return int(_top1_ranked(_ranked_labels(labels, scores)))


def _metric_id(metric) -> str:
    return metric.id if isinstance(metric, MetricSpec) else str(metric).upper()


def per_block(ds: BlockedDataset, scores, metric, *, skip_empty: bool = False) -> np.ndarray:
    """Metric value for every block of ``ds``, ordered as ``ds.blocks``.

    With ``skip_empty`` set, blocks without positives yield NaN instead of
    raising.
    """
    if ds.labels is None:
        raise DataValidationError("metric evaluation needs labels")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (ds.n_cases,):
        raise DataValidationError(f"scores have shape {scores.shape}, dataset has {ds.n_cases} cases")
    kernel = _KERNELS[_metric_id(metric)]
    out = np.empty(len(ds.blocks))
    for k, rows in enumerate(ds.groups):
        y = ds.labels[rows]
        if not y.any():
            if skip_empty:
                out[k] = np.nan
                continue
            raise UndefinedMetricError(f"block {ds.blocks[k]!r} has no positive cases")
        ranked = y[np.lexsort((y, -scores[rows]))].astype(np.int64)
        out[k] = kernel(ranked)
    return out


def block_average(ds: BlockedDataset, scores, metric, *, skip_empty: bool = False) -> float:
    """Unweighted mean of the per-block metric."""
    values = per_block(ds, scores, metric, skip_empty=skip_empty)
    if skip_empty:
        values = values[~np.isnan(values)]
        if values.size == 0:
            raise UndefinedMetricError("no block has a positive case")
    return float(values.mean())


@dataclass(frozen=True)
class HitCurve:
    """Cumulative positives ``hits[t-1]`` among the top ``t`` cases."""

    hits: np.ndarray
    n: int
    h: int

    def rows(self):
        return zip(range(1, self.n + 1), self.hits.tolist())


def hit_curve(labels, scores) -> HitCurve:
    labels = np.asarray(labels)
    order = pessimistic_order(labels, scores)
    hits = np.cumsum(labels[order].astype(np.int64))
    return HitCurve(hits, int(labels.size), int(hits[-1]) if hits.size else 0)


@dataclass(frozen=True)
class ReferenceDistribution:
    """Block-averaged metric values under random label placement."""

    samples: np.ndarray
    metric: MetricSpec
    n_perm: int
    seed: int

    def quantile(self, p: float) -> float:
        """Inverse-CDF (type 1) empirical quantile."""
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        xs = self.sorted
        k = max(math.ceil(len(xs) * p), 1)
        return float(xs[k - 1])

    @property
    def sorted(self) -> np.ndarray:
        return np.sort(self.samples, kind="stable")

    @property
    def median(self) -> float:
        return self.quantile(0.5)

    @property
    def cut(self) -> float:
        """The ``alpha`` quantile used as the weak-variable threshold."""
        return self.quantile(self.metric.alpha)


_MAX_REDRAWS = 1000


def permutation_reference(
    ds: BlockedDataset,
    metric: MetricSpec,
    n_perm: int = 2000,
    seed: int = 0,
    *,
    scores=None,
    scheme: Literal["block", "global"] = "block",
) -> ReferenceDistribution:
    """Reference distribution of the block-averaged metric under permuted labels.

    The ranking of cases inside each block is held fixed (row order when
    ``scores`` is None, else descending ``scores`` with pessimistic ties) and
    the labels are shuffled ``n_perm`` times.

    Args:
        scheme: ``"block"`` shuffles labels within each block, keeping every
            block's positive count. ``"global"`` shuffles across the whole
            dataset and redraws any replicate that leaves a block without
            positives, up to 1000 times per replicate.
    """
    if ds.labels is None:
        raise DataValidationError("permutation reference needs labels")
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    if scores is None:
        # Descending row position reproduces the recorded within-block order.
        scores = -np.arange(ds.n_cases, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    kernel = _KERNELS[metric.id]
    rng = np.random.default_rng(seed)

    if scheme == "block":
        total = np.zeros(n_perm)
        for k, rows in enumerate(ds.groups):
            y = ds.labels[rows].astype(np.int64)
            if not y.any():
                raise UndefinedMetricError(f"block {ds.blocks[k]!r} has no positive cases")
            perm = rng.permuted(np.tile(y, (n_perm, 1)), axis=1)
            total += kernel(_rank_rows(perm, scores[rows]))
        samples = total / len(ds.groups)
    elif scheme == "global":
        samples = np.empty(n_perm)
        y_all = ds.labels.astype(np.int64)
        codes = ds.block_codes
        nb = len(ds.groups)
        for r in range(n_perm):
            for _ in range(_MAX_REDRAWS):
                y = rng.permutation(y_all)
                if np.bincount(codes, weights=y, minlength=nb).min() > 0:
                    break
            else:
                raise UndefinedMetricError(
                    f"replicate {r}: {_MAX_REDRAWS} draws all left some block without positives"
                )
            vals = [kernel(_rank_rows(y[rows][None, :], scores[rows]))[0] for rows in ds.groups]
            samples[r] = np.mean(vals)
    else:
        raise ValueError(f"unknown permutation scheme {scheme!r}")
    return ReferenceDistribution(samples, metric, n_perm, seed)


def _rank_rows(labels2d: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Rank each row of a label matrix by shared ``scores``, pessimistic ties."""
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    lab = labels2d[:, order]
    if s.size < 2 or np.all(s[1:] != s[:-1]):
        return lab
    group = np.concatenate(([0], np.cumsum(s[1:] != s[:-1])))
    key = group[None, :] * 2 + lab
    return np.take_along_axis(lab, np.argsort(key, axis=1, kind="stable"), axis=1)
