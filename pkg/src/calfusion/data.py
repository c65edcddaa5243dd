"""Fused two-sample datasets and their CSV form.

A fused dataset stacks a primary sample, where the outcome ``y`` and the
common covariates ``v`` are seen, with an auxiliary sample, where the extra
covariates ``w`` and ``v`` are seen.  ``r`` flags the source of each row.
Missing cells are stored as NaN in memory and as empty fields on disk.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, PatternError, SchemaError

ROLES = ("source", "outcome", "common", "auxiliary")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FusedDataset:
    """Validated, immutable fused dataset.

    Parameters
    ----------
    r : (n,) array of 0/1 source flags (1 = primary sample).
    v : (n, p_v) common covariates, always observed.
    y : (n,) outcome, NaN on auxiliary rows.
    w : (n, q) auxiliary-only covariates, NaN on primary rows.
    """

    r: np.ndarray
    v: np.ndarray
    y: np.ndarray
    w: np.ndarray
    v_names: tuple[str, ...]
    w_names: tuple[str, ...]
    y_name: str = "Y"
    r_name: str = "R"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float).ravel()
        n = r.shape[0]
        v = np.asarray(self.v, dtype=float).reshape(n, -1)
        y = np.asarray(self.y, dtype=float).ravel()
        w = np.asarray(self.w, dtype=float).reshape(n, -1)
        if y.shape[0] != n:
            raise PatternError(f"y has {y.shape[0]} rows, expected {n}")
        if v.shape[1] != len(self.v_names):
            raise PatternError("v columns do not match v_names")
        if w.shape[1] != len(self.w_names) or len(self.w_names) < 1:
            raise PatternError("w columns do not match w_names (need at least one)")
        if not np.all((r == 0) | (r == 1)):
            raise PatternError("source indicator must be 0 or 1")
        if not np.all(np.isfinite(v)):
            raise PatternError("common covariates must be observed and finite on every row")
        prim = r == 1
        bad_y = prim & ~np.isfinite(y) | ~prim & ~np.isnan(y)
        if bad_y.any():
            i = int(np.flatnonzero(bad_y)[0])
            raise PatternError(f"row {i}: outcome must be present iff r = 1")
        w_present = np.isfinite(w).all(axis=1)
        w_absent = np.isnan(w).all(axis=1)
        bad_w = prim & ~w_absent | ~prim & ~w_present
        if bad_w.any():
            i = int(np.flatnonzero(bad_w)[0])
            raise PatternError(f"row {i}: auxiliary covariates must be present iff r = 0")
        m = int(prim.sum())
        if not 0 < m < n:
            raise PatternError(f"both samples must be nonempty (m={m}, n={n})")
        object.__setattr__(self, "r", _frozen(r))
        object.__setattr__(self, "v", _frozen(v))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "v_names", tuple(self.v_names))
        object.__setattr__(self, "w_names", tuple(self.w_names))

    @property
    def n(self) -> int:
        return self.r.shape[0]

    @property
    def m(self) -> int:
        return int(self.primary.sum())

    @property
    def primary(self) -> np.ndarray:
        if "primary" not in self._cache:
            mask = self.r == 1
            mask.setflags(write=False)
            self._cache["primary"] = mask
        return self._cache["primary"]

    @property
    def auxiliary(self) -> np.ndarray:
        if "auxiliary" not in self._cache:
            mask = self.r == 0
            mask.setflags(write=False)
            self._cache["auxiliary"] = mask
        return self._cache["auxiliary"]

    @property
    def primary_idx(self) -> np.ndarray:
        return np.flatnonzero(self.primary)

    @property
    def auxiliary_idx(self) -> np.ndarray:
        return np.flatnonzero(self.auxiliary)

    def take(self, rows: Sequence[int]) -> "FusedDataset":
        """Row subset (with repetition allowed), used by the bootstrap."""
        rows = np.asarray(rows, dtype=int)
        return FusedDataset(
            self.r[rows], self.v[rows], self.y[rows], self.w[rows],
            self.v_names, self.w_names, self.y_name, self.r_name,
        )

    def __eq__(self, other):
        if not isinstance(other, FusedDataset):
            return NotImplemented
        return (
            self.v_names == other.v_names
            and self.w_names == other.w_names
            and self.y_name == other.y_name
            and self.r_name == other.r_name
            and np.array_equal(self.r, other.r)
            and np.array_equal(self.v, other.v)
            and np.array_equal(self.y, other.y, equal_nan=True)
            and np.array_equal(self.w, other.w, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True)
class ReplicateSet:
    """Several fused datasets sharing one column schema (e.g. multiply imputed copies)."""

    replicates: tuple[FusedDataset, ...]

    def __post_init__(self):
        reps = tuple(self.replicates)
        if len(reps) < 1:
            raise SchemaError("a replicate set needs at least one dataset")
        first = reps[0]
        for d in reps[1:]:
            if d.v_names != first.v_names or d.w_names != first.w_names:
                raise SchemaError("replicates do not share a column schema")
        object.__setattr__(self, "replicates", reps)

    def __len__(self):
        return len(self.replicates)

    def __iter__(self):
        return iter(self.replicates)


def _check_schema(schema: Mapping[str, str], header: Sequence[str]):
    roles: dict[str, list[str]] = {role: [] for role in ROLES}
    for col, role in schema.items():
        if role not in ROLES:
            raise SchemaError(f"column {col!r}: unknown role {role!r} (expected one of {ROLES})")
        if col not in header:
            raise SchemaError(f"column {col!r} is not in the CSV header")
        roles[role].append(col)
    for role in ("source", "outcome"):
        if len(roles[role]) != 1:
            raise SchemaError(f"exactly one {role!r} column required, got {roles[role]}")
    for role in ("common", "auxiliary"):
        if not roles[role]:
            raise SchemaError(f"at least one {role!r} column required")
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names in CSV header")
    return roles


def _cell(text: str, line: int, col: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"line {line}, column {col!r}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"line {line}, column {col!r}: non-finite value {text!r}")
    return value


def read_fused_csv(path, schema: Mapping[str, str]) -> FusedDataset:
    """Read a fused dataset; ``schema`` maps column name to role.

    Columns missing from ``schema`` are ignored.  Common and auxiliary
    columns keep the order in which they appear in ``schema``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        roles = _check_schema(schema, header)
        pos = {name: i for i, name in enumerate(header)}
        src, out = roles["source"][0], roles["outcome"][0]
        r, y, v, w = [], [], [], []
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(f"line {line}: expected {len(header)} fields, got {len(rec)}")
            rv = _cell(rec[pos[src]], line, src)
            if rv not in (0.0, 1.0):
                raise ParseError(f"line {line}: source value must be 0 or 1, got {rec[pos[src]]!r}")
            r.append(rv)
            y.append(_cell(rec[pos[out]], line, out))
            v.append([_cell(rec[pos[c]], line, c) for c in roles["common"]])
            w.append([_cell(rec[pos[c]], line, c) for c in roles["auxiliary"]])
    if not r:
        raise ParseError(f"{path}: no data rows")
    try:
        return FusedDataset(
            np.array(r), np.array(v), np.array(y), np.array(w),
            tuple(roles["common"]), tuple(roles["auxiliary"]), y_name=out, r_name=src,
        )
    except PatternError as exc:
        raise PatternError(f"{path}: {exc}") from None


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else format(x, ".17g")


def write_fused_csv(data: FusedDataset, path) -> None:
    """Write ``data`` so that :func:`read_fused_csv` with :func:`default_schema` inverts it exactly."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow([data.r_name, *data.v_names, data.y_name, *data.w_names])
        for i in range(data.n):
            wr.writerow(
                [str(int(data.r[i]))]
                + [_fmt(x) for x in data.v[i]]
                + [_fmt(data.y[i])]
                + [_fmt(x) for x in data.w[i]]
            )


def default_schema(data: FusedDataset) -> dict[str, str]:
    """Schema matching the column layout written by :func:`write_fused_csv`."""
    schema = {data.r_name: "source"}
    schema.update({c: "common" for c in data.v_names})
    schema[data.y_name] = "outcome"
    schema.update({c: "auxiliary" for c in data.w_names})
    return schema
