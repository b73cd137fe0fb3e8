"""Maximum-likelihood logistic regression and out-of-fold probabilities.

The fit maximizes the Bernoulli log-likelihood minus ``ridge/2 * ||beta||^2``
on the slopes (never the intercept) by Newton/IRLS iterations. Internally the
columns are centred and scaled, with the penalty rescaled so the optimum is
the one defined on the raw features.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit, log_expit

from .data import BlockedDataset, FoldAssignment
from .errors import DataValidationError, NumericalError

__all__ = [
    "FittedModel",
    "ProbabilityVector",
    "irls",
    "fit_logistic",
    "predict",
    "predict_arrays",
    "cv_probabilities",
    "PROB_FLOOR",
]

log = logging.getLogger(__name__)

MAX_ITER = 100
TOL = 1e-8
WEIGHT_FLOOR = 1e-10
PROB_FLOOR = 1e-12
_RANK_TOL = 1e-10


@dataclass(frozen=True)
class FittedModel:
    """Intercept and slopes for an ordered list of feature indices.

    ``pinned`` lists variables whose slope was fixed at zero because their
    column was constant or linearly redundant in the training data.
    """

    intercept: float
    coefficients: np.ndarray
    variables: tuple[int, ...]
    converged: bool
    iterations: int
    pinned: tuple[int, ...] = ()

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=np.float64).reshape(-1)
        if coef.shape[0] != len(self.variables):
            raise ValueError("one coefficient per variable required")
        if not (np.isfinite(self.intercept) and np.all(np.isfinite(coef))):
            raise NumericalError("fitted model has non-finite coefficients")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "variables", tuple(int(v) for v in self.variables))
        object.__setattr__(self, "pinned", tuple(int(v) for v in self.pinned))


@dataclass(frozen=True, eq=False)
class ProbabilityVector:
    """Per-case probabilities aligned with a dataset's rows."""

    values: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return self.values.shape[0]


def _penalized_loglik(eta, y, beta, penalty):
    ll = np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta))
    return ll - 0.5 * np.sum(penalty * beta * beta)


def _usable_columns(z: np.ndarray) -> np.ndarray:
    """Mask of standardized columns that are not constant or collinear."""
    keep = np.ones(z.shape[1], dtype=bool)
    if z.shape[1] == 0:
        return keep
    norms = np.linalg.norm(z, axis=0)
    keep &= norms > 0
    idx = np.flatnonzero(keep)
    if idx.size > 1:
        # Pivoted QR on unit-norm centred columns; trailing tiny pivots are redundant.
        _, r, piv = scipy.linalg.qr(z[:, idx] / norms[idx], mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        redundant = piv[diag <= _RANK_TOL * diag[0]]
        keep[idx[redundant]] = False
    return keep


def irls(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6, *, max_iter: int = MAX_ITER, tol: float = TOL):
    """Penalized logistic regression on raw arrays.

    Returns:
        ``(intercept, coefficients, converged, iterations, pinned_mask)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("x must be (n, k) and y (n,)")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    n, k = x.shape
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    spread = np.ptp(x, axis=0) if n else np.zeros(k)
    const = spread == 0
    scale[const] = 1.0
    z = (x - mean) / scale
    z[:, const] = 0.0
    keep = _usable_columns(z) & ~const
    zk = z[:, keep]
    design = np.column_stack([np.ones(n), zk])
    penalty = np.concatenate(([0.0], ridge / scale[keep] ** 2))

    def to_raw(b):
        slopes = b[1:] / scale[keep]
        return b[0] - slopes @ mean[keep], slopes

    beta = np.zeros(design.shape[1])
    pbar = np.clip(y.mean(), 1e-6, 1 - 1e-6)
    beta[0] = np.log(pbar / (1 - pbar))
    eta = design @ beta
    obj = _penalized_loglik(eta, y, beta, penalty)
    raw_prev = np.concatenate(([to_raw(beta)[0]], to_raw(beta)[1]))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        w = np.maximum(p * (1 - p), WEIGHT_FLOOR)
        grad = design.T @ (y - p) - penalty * beta
        hess = (design * w[:, None]).T @ design + np.diag(penalty)
        try:
            step = scipy.linalg.solve(hess, grad, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            raise NumericalError("non-finite Newton step")
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            cand_eta = design @ cand
            cand_obj = _penalized_loglik(cand_eta, y, cand, penalty)
            if np.isfinite(cand_obj) and cand_obj >= obj - 1e-12 * abs(obj):
                break
            t *= 0.5
        beta, eta, obj = cand, cand_eta, cand_obj
        intercept, slopes = to_raw(beta)
        raw = np.concatenate(([intercept], slopes))
        if not np.all(np.isfinite(raw)):
            raise NumericalError("non-finite coefficients during IRLS")
        delta = np.max(np.abs(raw - raw_prev))
        raw_prev = raw
        if delta < tol:
            converged = True
            break
    intercept, slopes = to_raw(beta)
    coef = np.zeros(k)
    coef[keep] = slopes
    return float(intercept), coef, converged, it, ~keep


def fit_logistic(
    ds: BlockedDataset,
    variables: Sequence[int],
    ridge: float = 1e-6,
    *,
    rows: np.ndarray | None = None,
) -> FittedModel:
    """Fit a logistic model on ``variables`` of ``ds`` (optionally a row subset)."""
    if ds.labels is None:
        raise DataValidationError("fitting needs labels")
    variables = tuple(int(v) for v in variables)
    if not variables:
        raise ValueError("variables must be non-empty")
    if min(variables) < 0 or max(variables) >= ds.d_vars:
        raise ValueError(f"variable index out of range for {ds.d_vars} features")
    x = ds.features[:, variables]
    y = ds.labels
    if rows is not None:
        x, y = x[rows], y[rows]
    intercept, coef, converged, iters, pinned = irls(x, y, ridge)
    if pinned.any():
        log.debug("pinned to zero: %s", [v for v, p in zip(variables, pinned) if p])
    if not converged:
        log.debug("IRLS hit %d iterations on variables %s", iters, variables)
    return FittedModel(intercept, coef, variables, converged, iters,
                       tuple(v for v, p in zip(variables, pinned) if p))


def predict_arrays(model: FittedModel, features: np.ndarray) -> np.ndarray:
    eta = model.intercept + features[:, list(model.variables)] @ model.coefficients
    return np.clip(expit(eta), PROB_FLOOR, 1.0 - PROB_FLOOR)


def predict(model: FittedModel, ds: BlockedDataset) -> ProbabilityVector:
    """Inverse-logit of the linear predictor, clamped to ``[1e-12, 1 - 1e-12]``."""
    if model.variables and max(model.variables) >= ds.d_vars:
        raise DataValidationError(f"model uses feature {max(model.variables)} but dataset has {ds.d_vars}")
    return ProbabilityVector(predict_arrays(model, ds.features), provenance=f"vars{list(model.variables)}")


def cv_probabilities(
    ds: BlockedDataset,
    variables: Sequence[int],
    folds: FoldAssignment,
    ridge: float = 1e-6,
) -> ProbabilityVector:
    """Out-of-fold probabilities: each fold's blocks are scored by a model fit on the rest."""
    if ds.labels is None:
        raise DataValidationError("cross-validation needs labels")
    fold_of = folds.fold_of_rows(ds)
    out = np.empty(ds.n_cases)
    for f in range(folds.v):
        test = fold_of == f
        if not test.any():
            continue
        train = ~test
        if not ds.labels[train].any():
            raise DataValidationError(f"training split for fold {f} has no positive cases")
        model = fit_logistic(ds, variables, ridge, rows=train)
        out[test] = predict_arrays(model, ds.features[test])
    return ProbabilityVector(out, provenance=f"cv{sorted(int(v) for v in variables)}")
