"""Synthetic blocked data with planted phalanx structure.

``planted_pairs`` builds two disjoint feature pairs that are each predictive
only jointly, plus pure-noise features:

* pair ``(0, 1)`` carries a signal ``s1 = x0 - x1`` hidden under a shared
  nuisance ``u1`` with a large spread, so either column alone is weak;
* pair ``(2, 3)`` carries ``s2 = x2 - x3`` the same way.

Positives come in two types and negatives include two kinds of decoys:

========  ======  ======
case      s1      s2
========  ======  ======
type A    30      10
type B    10      30
decoy 1   20      ~N(0,1)
decoy 2   ~N(0,1) 20
other     ~N(0,1) ~N(0,1)
========  ======  ======

Each pair therefore ranks all positives above ordinary negatives but lets
its own decoys in ahead of one positive type, while averaging the two pair
models ranks every positive first. The gaps between these levels are wide,
so adding an uninformative feature to a pair model, or averaging a pair
model with a noise model, leaves every positive's rank unchanged.
"""
from __future__ import annotations

import numpy as np

from .data import BlockedDataset

__all__ = ["planted_pairs", "noise_dataset", "two_regime"]

PLANTED = ((0, 1), (2, 3))


def planted_pairs(
    seed: int = 0,
    n_blocks: int = 40,
    block_size: int = 100,
    positive_rate: float = 0.02,
    decoy_rate: float = 0.02,
    n_noise: int = 6,
    nuisance_sd: float = 50.0,
    jitter: float = 0.5,
    levels: tuple[float, float, float] = (30.0, 20.0, 10.0),
) -> BlockedDataset:
    """Dataset with the planted pairs (0, 1) and (2, 3) and ``n_noise`` noise columns.

    ``levels`` gives the high, decoy and low signal levels of the table above.
    Every block holds at least one positive.
    """
    rng = np.random.default_rng(seed)
    n = n_blocks * block_size
    blocks = np.repeat([f"B{b:03d}" for b in range(n_blocks)], block_size)
    kind = rng.choice(5, size=n, p=[positive_rate / 2, positive_rate / 2, decoy_rate, decoy_rate,
                                    1 - positive_rate - 2 * decoy_rate])
    for b in range(n_blocks):
        rows = slice(b * block_size, (b + 1) * block_size)
        if not np.isin(kind[rows], (0, 1)).any():
            kind[b * block_size + rng.integers(block_size)] = rng.integers(2)
    labels = np.isin(kind, (0, 1)).astype(np.int8)

    s1 = rng.normal(size=n)
    s2 = rng.normal(size=n)
    hi, mid, lo = levels
    placement = {0: (hi, lo), 1: (lo, hi), 2: (mid, None), 3: (None, mid)}
    for k, (l1, l2) in placement.items():
        m = kind == k
        if l1 is not None:
            s1[m] = l1 + jitter * rng.normal(size=m.sum())
        if l2 is not None:
            s2[m] = l2 + jitter * rng.normal(size=m.sum())

    u1 = nuisance_sd * rng.normal(size=n)
    u2 = nuisance_sd * rng.normal(size=n)
    cols = [u1 + s1 / 2, u1 - s1 / 2, u2 + s2 / 2, u2 - s2 / 2]
    cols += [rng.normal(size=n) for _ in range(n_noise)]
    case_ids = [str(i) for i in range(n)]
    return BlockedDataset(np.column_stack(cols), labels, blocks, case_ids)


def noise_dataset(seed: int = 0, n_blocks: int = 20, block_size: int = 50, d: int = 5,
                  positive_rate: float = 0.05) -> BlockedDataset:
    """Features independent of the labels."""
    rng = np.random.default_rng(seed)
    n = n_blocks * block_size
    labels = (rng.random(n) < positive_rate).astype(np.int8)
    for b in range(n_blocks):
        rows = slice(b * block_size, (b + 1) * block_size)
        if not labels[rows].any():
            labels[b * block_size + rng.integers(block_size)] = 1
    blocks = np.repeat([f"N{b:03d}" for b in range(n_blocks)], block_size)
    return BlockedDataset(rng.normal(size=(n, d)), labels, blocks)


def two_regime(seed: int = 0, n_blocks: int = 40, block_size: int = 100, positive_rate: float = 0.03,
               hard_share: float = 0.5) -> tuple[BlockedDataset, np.ndarray]:
    """Positives split into easy and hard subpopulations.

    Feature 0 separates easy positives sharply but hard ones barely; feature
    1 moves every positive by a moderate amount. Returns the dataset and a
    boolean mask of the hard positives.
    """
    rng = np.random.default_rng(seed)
    n = n_blocks * block_size
    labels = (rng.random(n) < positive_rate).astype(np.int8)
    for b in range(n_blocks):
        rows = slice(b * block_size, (b + 1) * block_size)
        if not labels[rows].any():
            labels[b * block_size + rng.integers(block_size)] = 1
    hard = (labels == 1) & (rng.random(n) < hard_share)
    easy = (labels == 1) & ~hard
    x0 = rng.normal(size=n) + 6.0 * easy + 0.3 * hard
    x1 = rng.normal(size=n) + 1.5 * labels
    blocks = np.repeat([f"T{b:03d}" for b in range(n_blocks)], block_size)
    return BlockedDataset(np.column_stack([x0, x1]), labels, blocks), hard
