"""Uniform time grids and a classical fourth-order Runge-Kutta integrator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BlowUpError


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    N: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"TimeGrid needs T > t0, got t0={self.t0}, T={self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"TimeGrid needs an integer N >= 1, got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def h(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.N + 1)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.N * factor)


def ode_rk4(rhs, y0, grid: TimeGrid, direction: str = "forward") -> np.ndarray:
    """Integrate ``y' = rhs(t, y)`` over ``grid``.

    ``y0`` is the value at ``grid.t0`` for a forward solve and at ``grid.T``
    for a backward solve.  The returned table has shape ``(N + 1, dim)`` and is
    ordered by increasing time in both directions.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    y = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    times = grid.times
    out = np.empty((grid.N + 1, y.size))
    if direction == "forward":
        order, h = range(grid.N + 1), grid.h
    else:
        order, h = range(grid.N, -1, -1), -grid.h
    order = list(order)
    out[order[0]] = y
    for k_prev, k in zip(order[:-1], order[1:]):
        t = times[k_prev]
        k1 = np.asarray(rhs(t, y), dtype=float)
        k2 = np.asarray(rhs(t + h / 2, y + h / 2 * k1), dtype=float)
        k3 = np.asarray(rhs(t + h / 2, y + h / 2 * k2), dtype=float)
        k4 = np.asarray(rhs(t + h, y + h * k3), dtype=float)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise BlowUpError(
                f"RK4 state became non-finite stepping to t={times[k]:.6g} "
                f"(last good node {k_prev}, t={times[k_prev]:.6g})",
                last_good_index=k_prev,
            )
        out[k] = y
    return out
