"""Trial data container, validation helpers and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Invalid trial data."""


class MissingColumn(DataError):
    pass


class NonBinaryOutcome(DataError):
    pass


class NonFiniteValue(DataError):
    pass


def check_binary(values, name):
    values = np.asarray(values, dtype=float)
    bad = np.flatnonzero((values != 0) & (values != 1))
    if bad.size:
        raise NonBinaryOutcome(
            f"{name} must be 0/1; row {int(bad[0])} has value {values[bad[0]]!r}"
        )
    return values


def check_trial_arrays(X, y, w, *, require_both_arms=True):
    """Validate and coerce covariates, binary outcome and binary treatment.

    Returns float64 C-contiguous copies ``(X, y, w)``.
    """
    X = np.array(X, dtype=float, order="C", copy=True)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DataError(f"X must be 2-d, got shape {X.shape}")
    n = X.shape[0]
    y = np.array(y, dtype=float).reshape(-1)
    w = np.array(w, dtype=float).reshape(-1)
    if y.shape[0] != n or w.shape[0] != n:
        raise DataError(f"X has {n} rows but y has {y.shape[0]} and w has {w.shape[0]}")
    bad = np.argwhere(~np.isfinite(X))
    if bad.size:
        i, j = bad[0]
        raise NonFiniteValue(f"X has a non-finite value at row {i}, column {j}")
    for name, v in (("y", y), ("w", w)):
        if not np.all(np.isfinite(v)):
            i = int(np.flatnonzero(~np.isfinite(v))[0])
            raise NonFiniteValue(f"{name} has a non-finite value at row {i}")
    check_binary(y, "y")
    check_binary(w, "w")
    if require_both_arms and (w.sum() == 0 or w.sum() == n):
        raise DataError("both treatment arms must be non-empty")
    return X, y, w


@dataclass(frozen=True)
class TrialDataset:
    """Covariates ``X``, binary outcomes ``y`` and binary treatment ``w``."""

    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    feature_names: tuple = field(default=())

    def __post_init__(self):
        X, y, w = check_trial_arrays(self.X, self.y, self.w, require_both_arms=False)
        names = tuple(self.feature_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} feature names for {X.shape[1]} columns")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "feature_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, rows) -> "TrialDataset":
        rows = np.asarray(rows)
        return TrialDataset(self.X[rows], self.y[rows], self.w[rows], self.feature_names)


def write_csv(dataset: TrialDataset, path, extra_columns=None):
    """Write ``y, w, <features...>[, extra...]`` with full float precision."""
    extra_columns = extra_columns or {}
    header = ["y", "w", *dataset.feature_names, *extra_columns]
    cols = [dataset.y.astype(int), dataset.w.astype(int)]
    cols += [dataset.X[:, j] for j in range(dataset.d)]
    cols += [np.asarray(v) for v in extra_columns.values()]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            writer.writerow([_fmt(c[i]) for c in cols])


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def ingest_csv(path) -> TrialDataset:
    """Read a trial CSV with header ``y, w, <features...>``.

    Raises
    ------
    MissingColumn, NonBinaryOutcome, NonFiniteValue
        Messages name the offending row (1-based, header excluded) or column.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn(f"{path}: empty file, no header row") from None
        for col in ("y", "w"):
            if col not in header:
                raise MissingColumn(f"{path}: required column {col!r} not in header")
        iy, iw = header.index("y"), header.index("w")
        feat_idx = [j for j, h in enumerate(header) if j not in (iy, iw)]
        if not feat_idx:
            raise MissingColumn(f"{path}: no feature columns")
        names = [header[j] for j in feat_idx]
        ys, ws, rows = [], [], []
        for lineno, record in enumerate(reader, start=1):
            if not record:
                continue
            if len(record) != len(header):
                raise MissingColumn(
                    f"{path}: row {lineno} has {len(record)} fields, expected {len(header)}"
                )
            y = _parse(record[iy], path, lineno, "y")
            w = _parse(record[iw], path, lineno, "w")
            if y not in (0.0, 1.0):
                raise NonBinaryOutcome(f"{path}: row {lineno}, column 'y' has value {record[iy]!r}")
            if w not in (0.0, 1.0):
                raise NonBinaryOutcome(f"{path}: row {lineno}, column 'w' has value {record[iw]!r}")
            ys.append(y)
            ws.append(w)
            rows.append([_parse(record[j], path, lineno, header[j]) for j in feat_idx])
    X = np.array(rows, dtype=float).reshape(len(rows), len(names))
    return TrialDataset(X, np.array(ys), np.array(ws), tuple(names))


def _parse(text, path, lineno, column):
    try:
        value = float(text)
    except ValueError:
        raise NonFiniteValue(f"{path}: row {lineno}, column {column!r}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise NonFiniteValue(f"{path}: row {lineno}, column {column!r} is not finite")
    return value
