"""B-spline bases for the transmission and ART-initiation rate models.

``order`` follows the usual B-spline convention of order = degree + 1, so
order 1 is piecewise constant and order 3 is piecewise quadratic.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

_KNOT_EPS = 1e-9


@dataclass(frozen=True)
class BasisSpec:
    order: int
    knot_interval: float
    t0: float
    t_end: float
    zero_before: float | None = None

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("spline order must be >= 1")
        if self.knot_interval <= 0:
            raise ValueError("knot interval must be positive")
        if not self.t_end > self.t0:
            raise ValueError("empty spline domain")
        if self.knot_interval > self.t_end - self.t0 + _KNOT_EPS:
            raise ValueError("knot interval larger than the domain span")

    def breakpoints(self) -> np.ndarray:
        """Distinct knots: every ``knot_interval`` from t0, closed by t_end."""
        n = int(np.floor((self.t_end - self.t0) / self.knot_interval + _KNOT_EPS))
        pts = self.t0 + self.knot_interval * np.arange(n + 1)
        if self.t_end - pts[-1] > _KNOT_EPS:
            pts = np.append(pts, self.t_end)
        else:
            pts[-1] = self.t_end
        return pts

    def knots(self) -> np.ndarray:
        """Clamped knot vector with boundary multiplicity ``order``."""
        b = self.breakpoints()
        k = self.order - 1
        return np.concatenate([np.full(k, b[0]), b, np.full(k, b[-1])])

    @property
    def n_full(self) -> int:
        """Basis size before dropping functions that die before ``zero_before``."""
        return len(self.breakpoints()) - 1 + self.order - 1


@dataclass(frozen=True)
class BasisMatrix:
    values: np.ndarray  # (T, K)
    grid: np.ndarray  # (T,)
    kept: np.ndarray  # indices into the full basis
    spec: BasisSpec

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @cached_property
    def support(self) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and values of the nonzero entries, each (T, order).

        Rows with fewer nonzeros are padded with column 0 and value 0.
        """
        T, o = self.values.shape[0], self.spec.order
        idx = np.zeros((T, o), dtype=np.intp)
        val = np.zeros((T, o))
        for t in range(T):
            nz = np.flatnonzero(self.values[t])
            idx[t, :nz.size] = nz
            val[t, :nz.size] = self.values[t, nz]
        idx.setflags(write=False)
        val.setflags(write=False)
        return idx, val

    @property
    def active(self) -> np.ndarray:
        """Rows not masked by ``zero_before``."""
        if self.spec.zero_before is None:
            return np.ones(len(self.grid), dtype=bool)
        return self.grid >= self.spec.zero_before - _KNOT_EPS


def cox_de_boor(knots: np.ndarray, order: int, t: np.ndarray) -> np.ndarray:
    """Evaluate every B-spline of ``order`` on ``knots`` at points ``t``.

    Intervals are half-open except the final nonempty one, which is closed on
    the right so the last function equals 1 at the end of the domain.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    knots = np.asarray(knots, dtype=float)
    m = len(knots) - 1
    B = ((knots[:-1][None, :] <= t[:, None]) & (t[:, None] < knots[1:][None, :])).astype(float)
    last = np.flatnonzero(knots[1:] > knots[:-1])[-1]
    B[t == knots[-1], :] = 0.0
    B[t == knots[-1], last] = 1.0
    for k in range(1, order):
        n = m - k
        left_den = knots[k:k + n] - knots[:n]
        right_den = knots[k + 1:k + 1 + n] - knots[1:1 + n]
        with np.errstate(divide="ignore", invalid="ignore"):
            left = np.where(left_den > 0, (t[:, None] - knots[:n]) / left_den, 0.0)
            right = np.where(right_den > 0, (knots[k + 1:k + 1 + n] - t[:, None]) / right_den, 0.0)
        B = left * B[:, :n] + right * B[:, 1:n + 1]
    return B


def make_basis(spec: BasisSpec, grid) -> BasisMatrix:
    """Evaluate the basis described by ``spec`` on ``grid``.

    With ``zero_before`` set, rows before that year are zeroed and functions
    whose support ends on or before it are dropped.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("grid must be a nonempty 1-d array")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    if grid[0] < spec.t0 - _KNOT_EPS or grid[-1] > spec.t_end + _KNOT_EPS:
        raise ValueError("grid extends outside the spline domain")
    knots = spec.knots()
    values = cox_de_boor(knots, spec.order, np.clip(grid, spec.t0, spec.t_end))
    kept = np.arange(values.shape[1])
    if spec.zero_before is not None:
        support_end = knots[spec.order:spec.order + values.shape[1]]
        kept = np.flatnonzero(support_end > spec.zero_before)
        values = values[:, kept]
        values[grid < spec.zero_before - _KNOT_EPS, :] = 0.0
    values = np.ascontiguousarray(values)
    values.setflags(write=False)
    grid = grid.copy()
    grid.setflags(write=False)
    return BasisMatrix(values, grid, kept, spec)
