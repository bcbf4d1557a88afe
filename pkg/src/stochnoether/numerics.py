"""Time stepping: Euler-Maruyama wealth paths, explicit FD HJB, Euler-Lagrange."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DegenerateLagrangianError, SimulationError
from .merton import MertonParams, ValueFunction, optimal_controls
from .ode import TimeGrid, ode_rk4

__all__ = [
    "TimeGrid",
    "ode_rk4",
    "FixedPolicy",
    "PathEnsemble",
    "simulate_merton",
    "worker_count",
    "FDSolution",
    "solve_hjb_fd",
    "Lagrangian",
    "Trajectory",
    "euler_lagrange_integrate",
]

WEALTH_FLOOR = 1e-8
CHUNK = 2048  # paths per work unit; fixed so results never depend on the worker count


def worker_count(workers: int | None = None) -> int:
    """Resolve a worker count; ``None`` reads ``STOCH_NOETHER_THREADS`` (0 = auto)."""
    if workers is None:
        raw = os.environ.get("STOCH_NOETHER_THREADS", "0").strip() or "0"
        try:
            workers = int(raw)
        except ValueError:
            raise ConfigurationError(f"STOCH_NOETHER_THREADS must be an integer, got {raw!r}") from None
    if workers < 0:
        raise ConfigurationError("worker count must be >= 0")
    if workers == 0:
        workers = os.cpu_count() or 1
    return workers


@dataclass(frozen=True)
class FixedPolicy:
    """Open-loop controls: consumption rate ``c`` and risky fraction ``gamma``."""

    c: float = 0.0
    gamma: float = 0.0

    @property
    def tag(self) -> str:
        return f"fixed(c={self.c!r},gamma={self.gamma!r})"


@dataclass
class PathEnsemble:
    grid: TimeGrid
    M: int
    wealth: np.ndarray
    consumption: np.ndarray
    gamma: np.ndarray
    base_seed: int
    clamp_events: int
    policy_tag: str
    params_fingerprint: str
    noise_refinement: int = 1

    @property
    def controls(self):
        """``(c, gamma)`` stacked to shape ``M x N x 2``."""
        return np.stack([self.consumption, self.gamma], axis=-1)


def _path_normals(base_seed: int, i: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=(int(base_seed) ^ int(i))))
    return gen.standard_normal(n)


def _simulate_chunk(params, policy, grid, start, stop, base_seed, refine, store_controls):
    m = stop - start
    N, h = grid.N, grid.h
    z = np.empty((m, N))
    for j, i in enumerate(range(start, stop)):
        raw = _path_normals(base_seed, i, N * refine)
        z[j] = raw.reshape(N, refine).sum(axis=1) / math.sqrt(refine)
    x0 = params.x0
    floor = WEALTH_FLOOR * x0
    X = np.empty((m, N + 1))
    X[:, 0] = x0
    C = np.empty((m, N)) if store_controls else None
    G = np.empty((m, N)) if store_controls else None
    clamps = 0
    sqh = math.sqrt(h)
    times = grid.times
    for k in range(N):
        t = times[k]
        xk = X[:, k]
        if isinstance(policy, ValueFunction):
            try:
                ctrl = optimal_controls(params, t, xk, policy.U_x(t, xk), policy.U_xx(t, xk))
            except Exception as exc:
                bad = int(np.argmin(xk))
                raise SimulationError(
                    f"policy evaluation failed on path {start + bad}, step {k}: {exc}") from exc
            c = np.asarray(ctrl.c_star, dtype=float)
            g = np.asarray(ctrl.gamma_star, dtype=float)
            if not (np.all(np.isfinite(c)) and np.all(np.isfinite(g))):
                bad = int(np.argmax(~(np.isfinite(c) & np.isfinite(g))))
                raise SimulationError(f"non-finite control on path {start + bad}, step {k}")
        else:
            c = np.full(m, float(policy.c))
            g = np.full(m, float(policy.gamma))
        mu, sig = params.mu_at(t), params.sigma_at(t)
        nxt = xk + ((g * (mu - params.r) + params.r) * xk - c) * h + xk * g * sig * sqh * z[:, k]
        low = nxt < floor
        if low.any():
            clamps += int(low.sum())
            nxt = np.where(low, floor, nxt)
        X[:, k + 1] = nxt
        if store_controls:
            C[:, k] = c
            G[:, k] = g
    return X, C, G, clamps


def simulate_merton(
    params: MertonParams,
    policy,
    grid: TimeGrid,
    M: int,
    base_seed: int = 0,
    workers: int | None = None,
    noise_refinement: int = 1,
    store_controls: bool = True,
) -> PathEnsemble:
    """Euler-Maruyama paths of the controlled wealth SDE.

    Path ``i`` draws its normals from Philox keyed by ``base_seed ^ i``.
    With ``noise_refinement = k`` each step consumes ``k`` consecutive
    normals combined into one, which reproduces the Brownian path of a
    ``k``-times finer run with the same seed.
    """
    if M < 1:
        raise ValueError("simulate_merton needs M >= 1")
    if noise_refinement < 1:
        raise ValueError("noise_refinement must be >= 1")
    if not isinstance(policy, (ValueFunction, FixedPolicy)):
        raise TypeError("policy must be a ValueFunction or FixedPolicy")
    bounds = [(s, min(s + CHUNK, M)) for s in range(0, M, CHUNK)]
    nw = min(worker_count(workers), len(bounds))

    def job(b):
        return _simulate_chunk(params, policy, grid, b[0], b[1], base_seed, noise_refinement, store_controls)

    if nw <= 1:
        parts = [job(b) for b in bounds]
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            parts = list(pool.map(job, bounds))
    wealth = np.concatenate([p[0] for p in parts])
    if store_controls:
        cons = np.concatenate([p[1] for p in parts])
        gam = np.concatenate([p[2] for p in parts])
    else:
        cons = gam = np.empty((M, 0))
    tag = policy.tag
    return PathEnsemble(grid, M, wealth, cons, gam, int(base_seed), sum(p[3] for p in parts), tag,
                        params.fingerprint(), noise_refinement)


# finite-difference HJB ---------------------------------------------------------

@dataclass
class FDSolution:
    x: np.ndarray
    times: np.ndarray
    values: np.ndarray  # len(times) x J
    c_argmax: np.ndarray  # control maximizers used on each coarse step (len(times)-1) x J
    gamma_argmax: np.ndarray
    substeps: int

    def at(self, k: int) -> np.ndarray:
        return self.values[k]


def _grid_levels(lo, hi, n):
    if n < 1:
        raise ConfigurationError("control grid needs at least one level")
    return np.array([lo]) if n == 1 else np.linspace(lo, hi, n)


def _grid_argmax_concave(levels, cont, objective):
    """Exact grid maximizer of a function concave in the control.

    The best grid point is a neighbour of the continuous maximizer ``cont``;
    both neighbours are evaluated, together with the grid endpoints.
    """
    n = levels.size
    if n == 1:
        return np.full(cont.shape, levels[0])
    step = (levels[-1] - levels[0]) / (n - 1)
    j = np.floor((np.nan_to_num(cont, nan=levels[0], posinf=levels[-1], neginf=levels[0]) - levels[0]) / step)
    j = np.clip(j, 0, n - 2).astype(int)
    cands = np.stack([levels[j], levels[j + 1], np.full(cont.shape, levels[0]), np.full(cont.shape, levels[-1])])
    vals = objective(cands)
    return np.take_along_axis(cands, np.argmax(vals, axis=0)[None], axis=0)[0]


def solve_hjb_fd(
    params: MertonParams,
    x_range: tuple = (0.5, 2.0),
    J: int = 101,
    grid: TimeGrid | None = None,
    c_max: float = 2.0,
    c_levels: int = 10001,
    gamma_levels: int = 10001,
    max_substeps: int = 1_000_000,
) -> FDSolution:
    """Explicit backward finite differences for the Merton HJB.

    Central differences in the interior, second-order one-sided first
    differences at both ends with the second difference copied from the
    adjacent interior node.  Each step of ``grid`` is split into equal
    substeps satisfying the explicit stability bound.
    """
    x_min, x_max = map(float, x_range)
    if not 0 < x_min < x_max:
        raise ConfigurationError("FD grid needs 0 < x_min < x_max")
    if J < 5:
        raise ConfigurationError("FD grid needs J >= 5 nodes")
    grid = grid or TimeGrid(0.0, params.T, 50)
    x = np.linspace(x_min, x_max, J)
    dx = x[1] - x[0]
    util = params.utility
    cgrid = _grid_levels(0.0, c_max if util.kind != "none" else 0.0, c_levels if util.kind != "none" else 1)
    ggrid = _grid_levels(0.0, 1.0, gamma_levels)

    ts = np.linspace(grid.t0, grid.T, 257)
    sig_max = float(np.max(params.sigma_at(ts)))
    mu_abs = float(np.max(np.abs(params.mu_at(ts) - params.r)))
    diff_max = (sig_max * ggrid.max() * x_max) ** 2
    drift_max = (mu_abs * ggrid.max() + abs(params.r)) * x_max + cgrid.max()
    h_stable = dx * dx / (diff_max + dx * drift_max)
    sub = max(1, math.ceil(grid.h / h_stable))
    if sub * grid.N > max_substeps:
        raise ConfigurationError(
            f"explicit stability needs {sub * grid.N} substeps (> {max_substeps}); coarsen J or refine the time grid")
    hs = grid.h / sub

    phi = np.asarray(util.terminal(x), dtype=float).copy()
    values = np.empty((grid.N + 1, J))
    values[grid.N] = phi
    c_used = np.empty((grid.N, J))
    g_used = np.empty((grid.N, J))

    for k in range(grid.N - 1, -1, -1):
        for s in range(sub):
            t = grid.t0 + (k + 1) * grid.h - s * hs
            d1 = np.empty(J)
            d2 = np.empty(J)
            d1[1:-1] = (phi[2:] - phi[:-2]) / (2 * dx)
            d2[1:-1] = (phi[2:] - 2 * phi[1:-1] + phi[:-2]) / dx**2
            d1[0] = (-3 * phi[0] + 4 * phi[1] - phi[2]) / (2 * dx)
            d1[-1] = (3 * phi[-1] - 4 * phi[-2] + phi[-3]) / (2 * dx)
            d2[0] = (2 * phi[0] - 5 * phi[1] + 4 * phi[2] - phi[3]) / dx**2
            d2[-1] = (2 * phi[-1] - 5 * phi[-2] + 4 * phi[-3] - phi[-4]) / dx**2
            mu, sig = params.mu_at(t), params.sigma_at(t)
            disc = math.exp(-params.rho * t)

            a2 = 0.5 * sig**2 * x**2 * d2
            a1 = (mu - params.r) * x * d1
            with np.errstate(divide="ignore", invalid="ignore"):
                g_cont = np.where(a2 < 0, -a1 / (2 * a2), np.where(a1 > 0, np.inf, -np.inf))
            g_opt = _grid_argmax_concave(ggrid, g_cont, lambda gg: a2 * gg**2 + a1 * gg)
            # with a2 >= 0 the quadratic is convex: endpoints are among the candidates

            if util.kind == "none":
                c_opt = np.zeros(J)
            else:
                pos = np.maximum(d1, 1e-300)
                if util.kind == "log":
                    c_cont = disc / pos
                else:
                    c_cont = (pos / disc) ** (1.0 / (util.theta - 1.0))
                c_cont = np.where(d1 > 0, c_cont, 0.0)

                def c_obj(cc):
                    with np.errstate(divide="ignore"):
                        return disc * util.V(cc) - cc * d1

                c_opt = _grid_argmax_concave(cgrid, c_cont, c_obj)
            with np.errstate(divide="ignore", invalid="ignore"):
                run = disc * util.V(c_opt) if util.kind != "none" else 0.0
            gen = a2 * g_opt**2 + a1 * g_opt + params.r * x * d1 - c_opt * d1 + run
            phi = phi + hs * gen
            if s == 0:
                c_used[k] = c_opt
                g_used[k] = g_opt
        if not np.all(np.isfinite(phi)):
            raise ConfigurationError(f"FD solution became non-finite at step {k}")
        values[k] = phi
    return FDSolution(x, grid.times, values, c_used, g_used, sub * grid.N)


# Euler-Lagrange -----------------------------------------------------------

def _fd_grad(f, z, h=None):
    z = np.asarray(z, dtype=float)
    out = np.empty(z.size)
    for i in range(z.size):
        hi = (h or np.finfo(float).eps ** (1 / 3)) * max(1.0, abs(z[i]))
        e = np.zeros(z.size)
        e[i] = hi
        out[i] = (f(z + e) - f(z - e)) / (2 * hi)
    return out


@dataclass
class Lagrangian:
    """Running reward ``L(t, x, a)`` for vector state and control.

    Derivative callables are optional; missing ones fall back to central
    differences of ``value``.
    """

    value: Callable
    grad_x: Callable | None = None
    grad_a: Callable | None = None
    hess_aa: Callable | None = None
    hess_ax: Callable | None = None
    name: str = "L"

    def L(self, t, x, a):
        return float(self.value(t, np.asarray(x, float), np.asarray(a, float)))

    def L_x(self, t, x, a):
        if self.grad_x is not None:
            return np.atleast_1d(np.asarray(self.grad_x(t, x, a), dtype=float))
        return _fd_grad(lambda z: self.L(t, z, a), x)

    def L_a(self, t, x, a):
        if self.grad_a is not None:
            return np.atleast_1d(np.asarray(self.grad_a(t, x, a), dtype=float))
        return _fd_grad(lambda z: self.L(t, x, z), a)

    def L_aa(self, t, x, a):
        if self.hess_aa is not None:
            return np.atleast_2d(np.asarray(self.hess_aa(t, x, a), dtype=float))
        n = np.size(a)
        h = np.finfo(float).eps ** 0.25
        return np.stack([_fd_grad(lambda z: self.L_a(t, x, z)[i], a, h) for i in range(n)])

    def L_ax(self, t, x, a):
        """Matrix ``d^2 L / (da_i dx_j)``."""
        if self.hess_ax is not None:
            return np.atleast_2d(np.asarray(self.hess_ax(t, x, a), dtype=float))
        n = np.size(a)
        h = np.finfo(float).eps ** 0.25
        return np.stack([_fd_grad(lambda z: self.L_a(t, z, a)[i], x, h) for i in range(n)])


@dataclass
class Trajectory:
    grid: TimeGrid
    x: np.ndarray  # (N+1) x n
    a: np.ndarray

    def __post_init__(self):
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.a))):
            raise ValueError("trajectory contains non-finite entries")


def euler_lagrange_integrate(L: Lagrangian, x0, a0, grid: TimeGrid, cond_limit: float = 1e12) -> Trajectory:
    """RK4 for ``x' = a``, ``a' = L_aa^{-1} (L_x - L_ax a)``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    a0 = np.atleast_1d(np.asarray(a0, dtype=float))
    if x0.shape != a0.shape:
        raise ValueError("x0 and a0 must have the same dimension")
    n = x0.size

    def rhs(t, y):
        x, a = y[:n], y[n:]
        Haa = L.L_aa(t, x, a)
        if not np.all(np.isfinite(Haa)) or np.linalg.cond(Haa) > cond_limit:
            raise DegenerateLagrangianError(f"d^2L/da^2 is singular at t={t:.6g}")
        acc = np.linalg.solve(Haa, L.L_x(t, x, a) - L.L_ax(t, x, a) @ a)
        return np.concatenate([a, acc])

    table = ode_rk4(rhs, np.concatenate([x0, a0]), grid, "forward")
    return Trajectory(grid, table[:, :n], table[:, n:])
