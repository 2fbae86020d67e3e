"""Observations and datasets for the partially nested trial design.

Every row in a dataset was *sampled* (D = 1).  Rows come in three kinds:

============  ==========================================================
``p=0, s=1``  randomized, in the part where the trial is nested
``p=0, s=0``  non-randomized, in the nested part (baseline data only)
``p=1, s=1``  randomized, in the part without nesting
============  ==========================================================

Non-randomized individuals from the non-nested part (``p=1, s=0``) are never
collected, so such rows are rejected.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import (
    EmptySubset,
    InvariantViolation,
    MissingColumn,
    NonNumericCovariate,
)

BINARY = "binary"
CONTINUOUS = "continuous"
OUTCOME_KINDS = (BINARY, CONTINUOUS)

#: rule identifier -> human readable statement
RULES = {
    "binary-indicator": "p, s and a take values 0 or 1",
    "no-treatment-data": "rows with s=0 carry no treatment or outcome",
    "trial-data-required": "rows with s=1 carry both treatment and outcome",
    "partial-nesting": "rows with p=1 must have s=1 (no non-randomized rows in the non-nested part)",
    "binary-outcome": "binary outcomes take values 0 or 1",
    "covariate-dimension": "all rows share the covariate dimension",
    "finite-covariates": "covariates are finite numbers",
}

DESIGN_COLUMNS = ("p", "s", "a", "y")


@dataclass(frozen=True)
class Observation:
    """One sampled individual."""

    x: tuple[float, ...]
    p: int
    s: int
    a: int | None = None
    y: float | None = None

    def __post_init__(self):
        check_row(self.p, self.s, self.a, self.y)


def check_row(p, s, a, y, row=None, outcome_kind=None):
    """Raise :class:`InvariantViolation` if a row breaks an observation rule."""
    if p not in (0, 1) or s not in (0, 1) or a not in (None, 0, 1):
        raise InvariantViolation(row, "binary-indicator", RULES["binary-indicator"])
    if p == 1 and s == 0:
        raise InvariantViolation(row, "partial-nesting", RULES["partial-nesting"])
    if s == 0 and (a is not None or y is not None):
        raise InvariantViolation(row, "no-treatment-data", RULES["no-treatment-data"])
    if s == 1 and (a is None or y is None):
        raise InvariantViolation(row, "trial-data-required", RULES["trial-data-required"])
    if outcome_kind == BINARY and y is not None and y not in (0, 1):
        raise InvariantViolation(row, "binary-outcome", f"y={y!r}")


def _readonly(arr):
    arr = np.array(arr)
    arr.setflags(write=False)
    return arr


class PartialNestDataset:
    """Validated, immutable collection of observations.

    Storage is columnar: ``X`` is ``(n, d)``, ``p``/``s`` are int arrays and
    ``a``/``y`` are float arrays holding NaN where absent (``s = 0``).  Row
    order is whatever the caller supplied and is never changed.
    """

    def __init__(self, X, p, s, a, y, covariate_names=None, outcome_kind=BINARY):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n, d = X.shape
        if covariate_names is None:
            covariate_names = [f"x{j + 1}" for j in range(d)]
        covariate_names = list(covariate_names)
        if len(covariate_names) != d:
            raise InvariantViolation(None, "covariate-dimension",
                                     f"{d} columns but {len(covariate_names)} names")
        if outcome_kind not in OUTCOME_KINDS:
            raise ValueError(f"outcome_kind must be one of {OUTCOME_KINDS}")
        p = np.asarray(p)
        s = np.asarray(s)
        a = np.asarray(a, dtype=float)
        y = np.asarray(y, dtype=float)
        for name, arr in (("p", p), ("s", s), ("a", a), ("y", y)):
            if arr.shape != (n,):
                raise InvariantViolation(None, "covariate-dimension",
                                         f"column {name} has shape {arr.shape}, expected ({n},)")
        self._validate(X, p, s, a, y, outcome_kind)

        self.X = _readonly(X)
        self.p = _readonly(p.astype(int))
        self.s = _readonly(s.astype(int))
        self.a = _readonly(a)
        self.y = _readonly(y)
        self.covariate_names = tuple(covariate_names)
        self.outcome_kind = outcome_kind

    @staticmethod
    def _validate(X, p, s, a, y, outcome_kind):
        if not np.all(np.isfinite(X)):
            row = int(np.argwhere(~np.isfinite(X))[0, 0])
            raise InvariantViolation(row, "finite-covariates", RULES["finite-covariates"])
        a_obs = ~np.isnan(a)
        y_obs = ~np.isnan(y)
        bad = (
            ~np.isin(p, (0, 1)) | ~np.isin(s, (0, 1))
            | (a_obs & ~np.isin(np.nan_to_num(a), (0, 1)))
            | ((p == 1) & (s == 0))
            | ((s == 0) & (a_obs | y_obs))
            | ((s == 1) & ~(a_obs & y_obs))
        )
        if outcome_kind == BINARY:
            bad |= y_obs & ~np.isin(np.nan_to_num(y), (0, 1))
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            ai = None if np.isnan(a[i]) else a[i]
            yi = None if np.isnan(y[i]) else y[i]
            check_row(p[i], s[i], ai, yi, row=i, outcome_kind=outcome_kind)
            raise AssertionError("row flagged but no rule matched")  # pragma: no cover

    # -- construction -----------------------------------------------------------

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], covariate_names=None,
                          outcome_kind=BINARY):
        if not observations:
            raise EmptySubset("a dataset needs at least one observation")
        dims = {len(o.x) for o in observations}
        if len(dims) != 1:
            raise InvariantViolation(None, "covariate-dimension", RULES["covariate-dimension"])
        nan = float("nan")
        return cls(
            [o.x for o in observations],
            [o.p for o in observations],
            [o.s for o in observations],
            [nan if o.a is None else o.a for o in observations],
            [nan if o.y is None else o.y for o in observations],
            covariate_names=covariate_names,
            outcome_kind=outcome_kind,
        )

    def take(self, index) -> "PartialNestDataset":
        """Rows at ``index`` (duplicates allowed), in the given order."""
        index = np.asarray(index)
        return PartialNestDataset(self.X[index], self.p[index], self.s[index],
                                  self.a[index], self.y[index],
                                  self.covariate_names, self.outcome_kind)

    def with_outcomes(self, y) -> "PartialNestDataset":
        return PartialNestDataset(self.X, self.p, self.s, self.a, y,
                                  self.covariate_names, self.outcome_kind)

    # -- views --------------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n0(self) -> int:
        return int(np.sum(self.p == 0))

    @property
    def n1(self) -> int:
        return int(np.sum(self.p == 1))

    @property
    def observations(self) -> list[Observation]:
        return list(self)

    def __len__(self):
        return self.n

    def __iter__(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield self.observation(i)

    def observation(self, i) -> Observation:
        a = None if np.isnan(self.a[i]) else int(self.a[i])
        y = None if np.isnan(self.y[i]) else float(self.y[i])
        return Observation(tuple(float(v) for v in self.X[i]), int(self.p[i]),
                           int(self.s[i]), a, y)

    def columns(self, names: Sequence[str] | None) -> np.ndarray:
        """Covariate sub-matrix for ``names`` (all covariates when ``None``)."""
        if names is None:
            return self.X
        idx = []
        for name in names:
            if name not in self.covariate_names:
                raise MissingColumn(name)
            idx.append(self.covariate_names.index(name))
        return self.X[:, idx]

    def __repr__(self):
        return (f"PartialNestDataset(n={self.n}, n0={self.n0}, n1={self.n1}, "
                f"covariates={list(self.covariate_names)}, outcome_kind={self.outcome_kind!r})")


# -- design matrices --------------------------------------------------------------

RowPredicate = Callable[[Observation], bool]


def design_matrix(data: PartialNestDataset, subset=None, columns=None):
    """Intercept-augmented covariate matrix for a subset of rows.

    Parameters
    ----------
    data : PartialNestDataset
    subset : None, boolean mask, or callable
        ``None`` selects every row.  A callable is applied to each
        :class:`Observation`.
    columns : sequence of str, optional
        Covariates to include; defaults to all of them.

    Returns
    -------
    matrix : ndarray, shape (m, k + 1)
        First column is all ones.
    index : ndarray of int
        Dataset row of each matrix row, in increasing order.
    """
    if subset is None:
        mask = np.ones(data.n, dtype=bool)
    elif callable(subset):
        mask = np.fromiter((bool(subset(o)) for o in data), dtype=bool, count=data.n)
    else:
        mask = np.asarray(subset, dtype=bool)
    index = np.flatnonzero(mask)
    if index.size == 0:
        raise EmptySubset("subset selects no rows")
    Z = data.columns(columns)[index]
    return add_intercept(Z), index


def add_intercept(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    return np.column_stack([np.ones(Z.shape[0]), Z])


# -- CSV ------------------------------------------------------------------------------

def _parse_indicator(value, row, column, allow_empty):
    value = value.strip()
    if value == "" and allow_empty:
        return None
    try:
        number = float(value)
    except ValueError:
        raise InvariantViolation(row, "binary-indicator",
                                 f"column {column!r} has value {value!r}") from None
    if number not in (0.0, 1.0):
        raise InvariantViolation(row, "binary-indicator",
                                 f"column {column!r} has value {value!r}")
    return int(number)


def _parse_outcome(value, row):
    value = value.strip()
    if value == "":
        return None
    try:
        number = float(value)
    except ValueError:
        raise InvariantViolation(row, "trial-data-required",
                                 f"outcome {value!r} is not numeric") from None
    if not math.isfinite(number):
        raise InvariantViolation(row, "trial-data-required",
                                 f"outcome {value!r} is not finite")
    return number


def parse_csv(path, covariate_columns=None, outcome_kind=BINARY) -> PartialNestDataset:
    """Read and validate a dataset.

    The header must contain ``p``, ``s``, ``a``, ``y`` and the covariate
    columns.  When ``covariate_columns`` is ``None`` every column other than
    the four design columns is treated as a covariate, in file order.
    Missing treatment/outcome values are empty fields; any other sentinel is
    rejected.  Row numbers in errors are 0-based data rows (header excluded).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in DESIGN_COLUMNS:
            if col not in header:
                raise MissingColumn(col)
        if covariate_columns is None:
            covariate_columns = [c for c in header if c not in DESIGN_COLUMNS]
        for col in covariate_columns:
            if col not in header:
                raise MissingColumn(col)

        X, P, S, A, Y = [], [], [], [], []
        for i, rec in enumerate(reader):
            x = []
            for col in covariate_columns:
                raw = rec[col]
                try:
                    v = float(raw)
                except (TypeError, ValueError):
                    raise NonNumericCovariate(i, col, raw) from None
                if not math.isfinite(v):
                    raise NonNumericCovariate(i, col, raw)
                x.append(v)
            p = _parse_indicator(rec["p"], i, "p", allow_empty=False)
            s = _parse_indicator(rec["s"], i, "s", allow_empty=False)
            a = _parse_indicator(rec["a"], i, "a", allow_empty=True)
            y = _parse_outcome(rec["y"], i)
            check_row(p, s, a, y, row=i, outcome_kind=outcome_kind)
            X.append(x)
            P.append(p)
            S.append(s)
            A.append(np.nan if a is None else a)
            Y.append(np.nan if y is None else y)

    if not X:
        raise EmptySubset(f"{path} has no data rows")
    return PartialNestDataset(np.array(X, dtype=float).reshape(len(X), len(covariate_columns)),
                              P, S, A, Y, covariate_columns, outcome_kind)


def _fmt(v):
    return repr(float(v))


def write_csv(data: PartialNestDataset, path) -> None:
    """Serialize in the ingestion format (covariates, then p, s, a, y)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*data.covariate_names, *DESIGN_COLUMNS])
        for i in range(data.n):
            a = "" if np.isnan(data.a[i]) else str(int(data.a[i]))
            if np.isnan(data.y[i]):
                y = ""
            elif data.outcome_kind == BINARY:
                y = str(int(data.y[i]))
            else:
                y = _fmt(data.y[i])
            writer.writerow([*(_fmt(v) for v in data.X[i]),
                             int(data.p[i]), int(data.s[i]), a, y])
