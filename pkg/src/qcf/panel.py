"""Long-format panel container and CSV ingestion.

CSV schema: a header row with a time column, a unit-id column, a response
column and d characteristic columns. Rows may appear in any order and the
panel may be unbalanced. Each row's characteristics are the information used
to model that row's response; lag them before ingestion if needed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qcf.errors import InputError


@dataclass(frozen=True)
class Panel:
    """Observations sorted by (period, unit).

    ``time`` and ``unit`` are integer codes into ``periods`` / ``units``.
    """

    time: np.ndarray
    unit: np.ndarray
    y: np.ndarray
    X: np.ndarray
    periods: tuple = ()
    units: tuple = ()
    characteristics: tuple[str, ...] = ()
    standardization: dict | None = field(default=None, compare=False)

    @classmethod
    def from_arrays(cls, time, unit, y, X, characteristics=None, standardization=None) -> "Panel":
        time = np.asarray(time)
        unit = np.asarray(unit)
        y = np.asarray(y, dtype=float).ravel()
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = len(y)
        if not (len(time) == len(unit) == n == X.shape[0]):
            raise InputError("time, unit, y and X must have the same number of rows")
        if n == 0:
            raise InputError("panel is empty")
        if not np.all(np.isfinite(X)):
            raise InputError("characteristics must be finite")
        if not np.all(np.isfinite(y)):
            raise InputError("responses must be finite")
        periods, tcode = np.unique(time, return_inverse=True)
        units, ucode = np.unique(unit, return_inverse=True)
        order = np.lexsort((ucode, tcode))
        tcode, ucode = tcode[order], ucode[order]
        dup = (np.diff(tcode) == 0) & (np.diff(ucode) == 0)
        if dup.any():
            k = int(np.flatnonzero(dup)[0]) + 1
            raise InputError(f"duplicate observation for unit {units[ucode[k]]!r} at period {periods[tcode[k]]!r}")
        d = X.shape[1]
        names = tuple(characteristics) if characteristics is not None else tuple(f"x{j + 1}" for j in range(d))
        if len(names) != d:
            raise InputError("characteristic names do not match the number of columns")
        return cls(
            time=tcode.astype(int),
            unit=ucode.astype(int),
            y=y[order],
            X=X[order],
            periods=tuple(periods.tolist()),
            units=tuple(units.tolist()),
            characteristics=names,
            standardization=standardization,
        )

    @classmethod
    def from_matrices(cls, Y, X) -> "Panel":
        """Balanced panel from Y (N x T) and X (N x T x d)."""
        Y = np.asarray(Y, dtype=float)
        X = np.asarray(X, dtype=float)
        N, T = Y.shape
        tt, ii = np.meshgrid(np.arange(T), np.arange(N), indexing="ij")
        return cls.from_arrays(tt.ravel(), ii.ravel(), Y.T.ravel(), X.transpose(1, 0, 2).reshape(N * T, -1))

    @property
    def n_obs(self) -> int:
        return len(self.y)

    @property
    def T(self) -> int:
        return len(self.periods)

    @property
    def N(self) -> int:
        return len(self.units)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def counts(self) -> np.ndarray:
        """n_t for each period."""
        return np.bincount(self.time, minlength=self.T)

    @property
    def is_balanced(self) -> bool:
        return self.n_obs == self.N * self.T

    def period_slices(self) -> list[slice]:
        bounds = np.concatenate([[0], np.cumsum(self.counts)])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    def select_periods(self, codes) -> "Panel":
        """Sub-panel restricted to the given period codes (re-coded from 0)."""
        codes = np.asarray(codes, dtype=int)
        keep = np.isin(self.time, codes)
        if not keep.any():
            raise InputError("no observations in the selected periods")
        return Panel.from_arrays(
            np.asarray(self.periods, dtype=object)[self.time[keep]],
            np.asarray(self.units, dtype=object)[self.unit[keep]],
            self.y[keep],
            self.X[keep],
            characteristics=self.characteristics,
            standardization=self.standardization,
        )

    def response_matrix(self) -> np.ndarray:
        """Y as N x T; only defined for balanced panels."""
        if not self.is_balanced:
            raise InputError("panel is unbalanced")
        Y = np.empty((self.N, self.T))
        Y[self.unit, self.time] = self.y
        return Y

    def standardized(self) -> "Panel":
        """Zero-mean, unit-variance characteristics (population variance)."""
        mean = self.X.mean(axis=0)
        std = self.X.std(axis=0)
        if np.any(std == 0):
            raise InputError("cannot standardize a constant characteristic")
        record = {"mean": mean.tolist(), "std": std.tolist(), "columns": list(self.characteristics)}
        return Panel(
            time=self.time,
            unit=self.unit,
            y=self.y,
            X=(self.X - mean) / std,
            periods=self.periods,
            units=self.units,
            characteristics=self.characteristics,
            standardization=record,
        )


def _parse_label(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def load_panel(
    path,
    time_col: str = "time",
    id_col: str = "id",
    y_col: str = "y",
    x_cols: list[str] | None = None,
    standardize: bool = False,
) -> Panel:
    """Read a long-format CSV panel.

    If ``x_cols`` is None every column other than time/id/y is a characteristic,
    in file order. Malformed rows raise InputError citing the line number.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        for col in (time_col, id_col, y_col):
            if col not in header:
                raise InputError(f"{path}: missing column {col!r}")
        if x_cols is None:
            x_cols = [h for h in header if h not in (time_col, id_col, y_col)]
        missing = [c for c in x_cols if c not in header]
        if missing:
            raise InputError(f"{path}: missing characteristic columns {missing}")
        if not x_cols:
            raise InputError(f"{path}: no characteristic columns")
        it, ii, iy = header.index(time_col), header.index(id_col), header.index(y_col)
        ix = [header.index(c) for c in x_cols]
        times, ids, ys, xs = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                yv = float(row[iy])
                xv = [float(row[j]) for j in ix]
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            if not math.isfinite(yv) or not all(math.isfinite(v) for v in xv):
                raise InputError(f"{path}:{lineno}: non-finite value")
            times.append(_parse_label(row[it].strip()))
            ids.append(_parse_label(row[ii].strip()))
            ys.append(yv)
            xs.append(xv)
    if not ys:
        raise InputError(f"{path}: no observations")
    try:
        panel = Panel.from_arrays(np.array(times, dtype=object), np.array(ids, dtype=object), ys, xs, characteristics=x_cols)
    except TypeError:
        raise InputError(f"{path}: mixed label types in the time or id column") from None
    return panel.standardized() if standardize else panel


def write_panel(panel: Panel, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "id", "y", *panel.characteristics])
        for t, i, yv, xv in zip(panel.time, panel.unit, panel.y, panel.X):
            w.writerow([panel.periods[t], panel.units[i], repr(float(yv)), *(repr(float(v)) for v in xv)])
