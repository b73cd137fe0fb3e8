"""Blocked two-class datasets, delimited-text I/O and block-level fold assignment.

A dataset row is one candidate case. Cases are grouped into blocks (one block
per query/native protein in the homology setting) and every ranking metric is
computed inside a block, then averaged over blocks.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np

from .errors import DataValidationError, ParseError

__all__ = [
    "Schema",
    "BlockedDataset",
    "FoldAssignment",
    "load_dataset",
    "write_dataset",
    "make_folds",
    "from_arrays",
    "KDD_TRAIN",
    "KDD_TEST",
]


@dataclass(frozen=True)
class Schema:
    """Column roles of a headerless delimited file.

    Column indices are 0-based. Every column that is not the block, case or
    label column is a feature, in file order.
    """

    block: int = 0
    case: int | None = None
    label: int | None = None
    delimiter: str = "whitespace"
    header: bool = False

    def __post_init__(self):
        if self.delimiter not in ("whitespace", "comma"):
            raise ValueError(f"delimiter must be 'whitespace' or 'comma', got {self.delimiter!r}")
        roles = [c for c in (self.block, self.case, self.label) if c is not None]
        if len(set(roles)) != len(roles):
            raise ValueError("block, case and label must be distinct columns")
        if any(c < 0 for c in roles):
            raise ValueError("column indices must be non-negative")

    @property
    def role_columns(self) -> tuple[int, ...]:
        return tuple(c for c in (self.block, self.case, self.label) if c is not None)

    def without_label(self) -> Schema:
        return Schema(self.block, self.case, None, self.delimiter, self.header)

    def split(self, line: str) -> list[str]:
        if self.delimiter == "comma":
            return [tok.strip() for tok in line.split(",")]
        return line.split()

    @property
    def sep(self) -> str:
        return "," if self.delimiter == "comma" else " "

    def to_dict(self) -> dict:
        return {
            "block": self.block,
            "case": self.case,
            "label": self.label,
            "delimiter": self.delimiter,
            "header": self.header,
        }

    @classmethod
    def parse(cls, text: str) -> Schema:
        """Build a schema from a preset name, a JSON file path or ``key=value`` pairs.

        >>> Schema.parse("block=0,case=1,label=2")
        Schema(block=0, case=1, label=2, delimiter='whitespace', header=False)
        """
        if text in PRESETS:
            return PRESETS[text]
        if os.path.isfile(text):
            with open(text) as fh:
                return cls(**json.load(fh))
        kwargs: dict = {}
        for item in filter(None, (s.strip() for s in text.split(","))):
            if "=" not in item:
                raise ValueError(f"bad schema item {item!r}; expected key=value")
            key, value = (s.strip() for s in item.split("=", 1))
            if key in ("block", "case", "label"):
                kwargs[key] = None if value.lower() in ("", "none") else int(value)
            elif key == "delimiter":
                kwargs[key] = value
            elif key == "header":
                kwargs[key] = value.lower() in ("1", "true", "yes")
            else:
                raise ValueError(f"unknown schema key {key!r}")
        return cls(**kwargs)


# KDD Cup 2004 protein homology layout: BLOCK ID, EXAMPLE ID, [label], 74 features.
KDD_TRAIN = Schema(block=0, case=1, label=2)
KDD_TEST = Schema(block=0, case=1, label=None)
PRESETS = {"kdd-train": KDD_TRAIN, "kdd-test": KDD_TEST}


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BlockedDataset:
    """Feature matrix, optional binary labels and block membership.

    Arrays are copied and frozen on construction. Blocks are keyed by their
    literal identifier string; ``blocks`` lists them in sorted order and
    ``groups[k]`` holds the row indices of ``blocks[k]`` in file order.
    """

    features: np.ndarray
    labels: np.ndarray | None
    block_ids: np.ndarray
    case_ids: np.ndarray | None = None
    require_positives: bool = field(default=True, repr=False)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise DataValidationError("features must be a 2-d matrix")
        n, d = x.shape
        if d < 1:
            raise DataValidationError("dataset needs at least one feature column")
        if not np.all(np.isfinite(x)):
            row, col = np.argwhere(~np.isfinite(x))[0]
            raise DataValidationError(f"non-finite feature value at row {row}, feature {col}")
        b = np.array([str(v) for v in np.asarray(self.block_ids, dtype=object).ravel()], dtype=object)
        if b.shape[0] != n:
            raise DataValidationError(f"block_ids has {b.shape[0]} entries for {n} rows")
        object.__setattr__(self, "features", _readonly(x))
        object.__setattr__(self, "block_ids", _readonly(b))

        if self.case_ids is not None:
            c = np.array([str(v) for v in np.asarray(self.case_ids, dtype=object).ravel()], dtype=object)
            if c.shape[0] != n:
                raise DataValidationError(f"case_ids has {c.shape[0]} entries for {n} rows")
            object.__setattr__(self, "case_ids", _readonly(c))

        if self.labels is not None:
            y = np.asarray(self.labels)
            if y.shape != (n,):
                raise DataValidationError(f"labels must have shape ({n},), got {y.shape}")
            if not np.all((y == 0) | (y == 1)):
                raise DataValidationError("labels must be 0 or 1")
            object.__setattr__(self, "labels", _readonly(y.astype(np.int8)))
            if self.require_positives:
                counts = self.positives_per_block
                empty = [k for k, c in zip(self.blocks, counts) if c == 0]
                if empty:
                    raise DataValidationError(
                        f"block {empty[0]!r} has no positive cases"
                        + (f" ({len(empty) - 1} more)" if len(empty) > 1 else "")
                    )

    @property
    def n_cases(self) -> int:
        return self.features.shape[0]

    @property
    def d_vars(self) -> int:
        return self.features.shape[1]

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    @cached_property
    def _block_codes(self) -> tuple[np.ndarray, np.ndarray]:
        keys, codes = np.unique(self.block_ids.astype(str), return_inverse=True)
        return keys.astype(object), codes

    @property
    def blocks(self) -> np.ndarray:
        """Sorted distinct block keys."""
        return self._block_codes[0]

    @property
    def block_codes(self) -> np.ndarray:
        """Per-row index into :attr:`blocks`."""
        return self._block_codes[1]

    @cached_property
    def groups(self) -> list[np.ndarray]:
        order = np.argsort(self.block_codes, kind="stable")
        bounds = np.cumsum(np.bincount(self.block_codes, minlength=len(self.blocks)))[:-1]
        return [_readonly(g) for g in np.split(order, bounds)]

    @cached_property
    def positives_per_block(self) -> np.ndarray:
        if self.labels is None:
            raise DataValidationError("dataset has no labels")
        return np.bincount(self.block_codes, weights=self.labels, minlength=len(self.blocks)).astype(int)

    def case_keys(self) -> np.ndarray:
        """Case identifiers, falling back to 1-based row numbers."""
        if self.case_ids is not None:
            return self.case_ids
        return np.array([str(i + 1) for i in range(self.n_cases)], dtype=object)

    def subset(self, rows: np.ndarray) -> BlockedDataset:
        rows = np.asarray(rows)
        return BlockedDataset(
            self.features[rows],
            None if self.labels is None else self.labels[rows],
            self.block_ids[rows],
            None if self.case_ids is None else self.case_ids[rows],
            require_positives=False,
        )


@dataclass(frozen=True)
class FoldAssignment:
    """Map from block key to a fold index in ``[0, v)``."""

    block_to_fold: Mapping[str, int]
    v: int
    seed: int

    def fold_of_rows(self, ds: BlockedDataset) -> np.ndarray:
        try:
            per_block = np.array([self.block_to_fold[k] for k in ds.blocks], dtype=int)
        except KeyError as exc:
            raise DataValidationError(f"block {exc.args[0]!r} has no fold assignment") from None
        return per_block[ds.block_codes]

    def folds(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.v)]
        for key in sorted(self.block_to_fold):
            out[self.block_to_fold[key]].append(key)
        return out


def make_folds(ds: BlockedDataset, v: int = 10, seed: int = 0) -> FoldAssignment:
    """Assign whole blocks to ``v`` folds.

    Block keys are sorted, shuffled with ``seed`` and dealt round-robin, so
    fold sizes differ by at most one block and the result does not depend on
    row order in the source file.
    """
    keys = sorted(str(k) for k in ds.blocks)
    if v < 1:
        raise ValueError("v must be >= 1")
    if len(keys) < v:
        raise DataValidationError(f"{len(keys)} blocks cannot fill {v} folds")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(keys))
    mapping = {keys[j]: pos % v for pos, j in enumerate(order)}
    return FoldAssignment(dict(sorted(mapping.items())), v, seed)


def load_dataset(path, schema: Schema, *, require_positives: bool = True) -> BlockedDataset:
    """Read a delimited file into a validated :class:`BlockedDataset`.

    Args:
        path: file to read.
        schema: column roles.
        require_positives: when the schema has a label column, reject blocks
            without any positive case (training data contract).

    Raises:
        ParseError: a row has the wrong number of columns or a bad token.
        DataValidationError: non-finite features or a positive-free block.
    """
    rows: list[list[str]] = []
    lines: list[int] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            if schema.header and lineno == 1:
                continue
            if not raw.strip():
                continue
            rows.append(schema.split(raw))
            lines.append(lineno)
    if not rows:
        raise ParseError(f"{path}: no data rows")

    width = len(rows[0])
    if max(schema.role_columns) >= width:
        raise ParseError(f"schema references column {max(schema.role_columns)} but rows have {width}", lines[0])
    for toks, lineno in zip(rows, lines):
        if len(toks) != width:
            raise ParseError(f"expected {width} columns, found {len(toks)}", lineno)

    feat_cols = [c for c in range(width) if c not in schema.role_columns]
    if not feat_cols:
        raise ParseError("no feature columns left after assigning roles", lines[0])

    table = np.array(rows, dtype=object)
    try:
        x = table[:, feat_cols].astype(np.float64)
    except ValueError:
        for toks, lineno in zip(rows, lines):
            for c in feat_cols:
                try:
                    float(toks[c])
                except ValueError:
                    raise ParseError(f"column {c}: cannot parse {toks[c]!r} as a number", lineno) from None
        raise
    bad = ~np.isfinite(x)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataValidationError(f"line {lines[r]}: non-finite feature value {rows[r][feat_cols[c]]!r}")

    labels = None
    if schema.label is not None:
        col = table[:, schema.label]
        try:
            lv = col.astype(np.float64)
        except ValueError:
            r = next(i for i, t in enumerate(col) if not _is_number(t))
            raise ParseError(f"label {col[r]!r} is not numeric", lines[r]) from None
        nonbinary = ~np.isin(lv, (0.0, 1.0))
        if nonbinary.any():
            r = int(np.flatnonzero(nonbinary)[0])
            raise DataValidationError(f"line {lines[r]}: label {col[r]!r} is not 0 or 1")
        labels = lv.astype(np.int8)

    case_ids = table[:, schema.case] if schema.case is not None else None
    return BlockedDataset(x, labels, table[:, schema.block], case_ids, require_positives=require_positives)


def _is_number(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def write_dataset(ds: BlockedDataset, path, schema: Schema) -> None:
    """Write ``ds`` in the layout described by ``schema``.

    Features use ``repr`` formatting, which round-trips float64 exactly.
    """
    roles = {schema.block: "block"}
    if schema.case is not None:
        roles[schema.case] = "case"
    if schema.label is not None:
        if ds.labels is None:
            raise DataValidationError("schema has a label column but dataset is unlabeled")
        roles[schema.label] = "label"
    width = ds.d_vars + len(roles)
    if max(roles) >= width:
        raise ValueError("schema role columns exceed row width")
    cases = ds.case_keys()
    with open(path, "w") as fh:
        for i in range(ds.n_cases):
            feats = iter(ds.features[i])
            out: list[str] = []
            for c in range(width):
                role = roles.get(c)
                if role == "block":
                    out.append(str(ds.block_ids[i]))
                elif role == "case":
                    out.append(str(cases[i]))
                elif role == "label":
                    out.append(str(int(ds.labels[i])))
                else:
                    out.append(repr(float(next(feats))))
            fh.write(schema.sep.join(out) + "\n")


def from_arrays(
    features: Sequence,
    labels: Sequence | None,
    block_ids: Sequence,
    case_ids: Sequence | None = None,
    *,
    require_positives: bool = True,
) -> BlockedDataset:
    return BlockedDataset(np.asarray(features), None if labels is None else np.asarray(labels),
                          np.asarray(block_ids, dtype=object),
                          None if case_ids is None else np.asarray(case_ids, dtype=object),
                          require_positives=require_positives)
