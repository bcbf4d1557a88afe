"""Merton portfolio problem: coefficients, controls, value function, symmetries.

Wealth follows ``dX = ((gamma (mu - r) + r) X - c) dt + X gamma sigma dW`` and
the reduced HJB equation reads ``u_t + H = 0`` with

    H(t, x, u_x, u_xx) = -delta(t)/2 * u_x**2 / u_xx + h_V(t, u_x) + r x u_x,
    delta(t) = (mu(t) - r)**2 / sigma(t)**2.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Union

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .errors import (
    AnsatzMismatchError,
    ConstructionError,
    DomainError,
    RangeError,
    ReductionError,
    SingularControlError,
)
from .jet import Field, JetPoint, SmoothField, constant, coordinate, log_of, power, time_function
from .ode import TimeGrid, ode_rk4
from .symmetry import (
    DeterminingReport,
    EvolutionEquation,
    JetSamplingBox,
    determining_residual,
    residual_scan,
)

SIGMA_FLOOR = 1e-6
FAMILIES = ("Omega1", "Omega2", "Omega3", "Omega4")

Coefficient = Union[float, Callable[[float], float]]


@dataclass(frozen=True)
class Utility:
    """Consumption utility ``V`` and the matching terminal payoff ``g``.

    ``kind`` is ``"log"`` (``V = log c``, ``g = log x``), ``"power"``
    (``V = c**theta/theta``, ``g = x**theta/theta``) or ``"none"`` (no
    consumption, ``g = x**theta/theta``).
    """

    kind: str = "power"
    theta: float | None = 0.5

    def __post_init__(self):
        if self.kind not in ("log", "power", "none"):
            raise ValueError(f"unknown utility kind {self.kind!r}")
        if self.kind == "log":
            object.__setattr__(self, "theta", None)
        else:
            if self.theta is None or self.theta in (0.0, 1.0) or not math.isfinite(self.theta):
                raise ValueError(f"power-type utility needs theta not in {{0, 1}}, got {self.theta}")

    @classmethod
    def log(cls):
        return cls("log", None)

    @classmethod
    def power(cls, theta: float):
        return cls("power", theta)

    @classmethod
    def none(cls, theta: float):
        return cls("none", theta)

    @property
    def label(self) -> str:
        return "log" if self.kind == "log" else f"{self.kind}(theta={self.theta:g})"

    def V(self, c):
        c = np.asarray(c, dtype=float)
        if self.kind == "log":
            with np.errstate(divide="ignore"):
                return np.log(c)
        if self.kind == "power":
            return c**self.theta / self.theta
        return np.zeros_like(c)

    def terminal(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "log":
            return np.log(x)
        return x**self.theta / self.theta


@dataclass(frozen=True)
class CoefficientPath:
    """Market coefficients tabulated on a time grid; linear in between nodes."""

    times: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    delta: np.ndarray
    provenance: str = "deterministic"
    seed: int | None = None

    def __post_init__(self):
        for name in ("times", "mu", "sigma", "delta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.times.size == 0:
            raise ValueError("coefficient path has an empty grid")
        if np.any(self.sigma < SIGMA_FLOOR):
            raise ValueError(f"sigma path falls below {SIGMA_FLOOR}")

    def _interp(self, values, t):
        t = np.asarray(t, dtype=float)
        lo, hi = self.times[0], self.times[-1]
        tol = 1e-12 * max(1.0, abs(hi))
        if np.any(t < lo - tol) or np.any(t > hi + tol):
            raise RangeError(f"t outside the coefficient path grid [{lo}, {hi}]")
        out = np.interp(t, self.times, values)
        return float(out) if out.ndim == 0 else out

    def mu_at(self, t):
        return self._interp(self.mu, t)

    def sigma_at(self, t):
        return self._interp(self.sigma, t)

    def delta_at(self, t):
        return self._interp(self.delta, t)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.times, self.mu, self.sigma, self.delta):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class PathSpec:
    """Recipe for :func:`sample_coefficient_path`.

    ``kind`` is ``"constant"``, ``"deterministic"`` (``mu``/``sigma`` may be
    callables of ``t``) or ``"log-ou"`` (``log sigma`` is an Ornstein-Uhlenbeck
    process around ``log sigma_mean``; ``mu`` stays constant).
    """

    kind: str = "constant"
    mu: Coefficient = 0.03
    sigma: Coefficient = 0.25
    sigma_mean: float = 0.25
    reversion: float = 2.0
    vol_of_vol: float = 0.5


def sample_coefficient_path(spec: PathSpec, grid, r: float, seed: int = 0) -> CoefficientPath:
    times = grid.times if isinstance(grid, TimeGrid) else np.asarray(grid, dtype=float)
    if times.size == 0:
        raise ValueError("coefficient path grid is empty")
    if spec.kind in ("constant", "deterministic"):
        mu = _tabulate(spec.mu, times)
        sigma = _tabulate(spec.sigma, times)
        provenance = spec.kind
        seed = None
    elif spec.kind == "log-ou":
        if spec.sigma_mean < SIGMA_FLOOR or spec.reversion < 0 or spec.vol_of_vol < 0:
            raise ValueError("log-OU path needs sigma_mean >= 1e-6 and nonnegative rates")
        rng = np.random.Generator(np.random.Philox(key=seed))
        z = rng.standard_normal(times.size - 1)
        m = math.log(spec.sigma_mean)
        y = np.empty(times.size)
        y[0] = m
        for k, dt in enumerate(np.diff(times)):
            if spec.reversion > 0:
                decay = math.exp(-spec.reversion * dt)
                sd = spec.vol_of_vol * math.sqrt((1 - decay * decay) / (2 * spec.reversion))
            else:
                decay, sd = 1.0, spec.vol_of_vol * math.sqrt(dt)
            y[k + 1] = m + (y[k] - m) * decay + sd * z[k]
        sigma = np.maximum(np.exp(y), SIGMA_FLOOR)
        mu = _tabulate(spec.mu, times)
        provenance = f"log-ou(seed={seed})"
    else:
        raise ValueError(f"unknown path kind {spec.kind!r}")
    delta = (mu - r) ** 2 / sigma**2
    return CoefficientPath(times, mu, sigma, delta, provenance=provenance, seed=seed)


def _tabulate(coef, times):
    if callable(coef):
        return np.asarray([coef(t) for t in times], dtype=float)
    return np.full(times.shape, float(coef))


@dataclass(frozen=True)
class MertonParams:
    r: float = 0.01
    rho: float = 0.1
    mu: Coefficient = 0.03
    sigma: Coefficient = 0.25
    utility: Utility = dataclasses.field(default_factory=Utility)
    T: float = 1.0
    x0: float = 1.0
    path: CoefficientPath | None = None

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if not self.rho >= 0:
            raise ValueError(f"discount rate rho must be >= 0, got {self.rho}")
        if not self.x0 > 0:
            raise ValueError(f"initial wealth x0 must be positive, got {self.x0}")
        if self.path is None:
            ts = np.linspace(0.0, self.T, 1001) if callable(self.sigma) else np.array([0.0])
            s = np.asarray([self._coef(self.sigma, t) for t in ts])
            if np.any(~np.isfinite(s)) or np.any(s < SIGMA_FLOOR):
                raise ValueError(f"sigma must stay >= {SIGMA_FLOOR} on [0, T]")

    @staticmethod
    def _coef(c, t):
        if callable(c):
            return c(t)
        return float(c)

    def _vec(self, c, t):
        t = np.asarray(t, dtype=float)
        if callable(c):
            out = np.vectorize(c, otypes=[float])(t)
        else:
            out = np.full(t.shape, float(c))
        return float(out) if out.ndim == 0 else out

    def mu_at(self, t):
        return self.path.mu_at(t) if self.path is not None else self._vec(self.mu, t)

    def sigma_at(self, t):
        return self.path.sigma_at(t) if self.path is not None else self._vec(self.sigma, t)

    @property
    def constant_coefficients(self) -> bool:
        return self.path is None and not callable(self.mu) and not callable(self.sigma)

    def with_path(self, path: CoefficientPath | None) -> "MertonParams":
        return dataclasses.replace(self, path=path)

    def fingerprint(self) -> str:
        def rep(c):
            return getattr(c, "__qualname__", None) or repr(c) if callable(c) else repr(float(c))

        parts = [repr(self.r), repr(self.rho), rep(self.mu), rep(self.sigma), self.utility.label,
                 repr(self.T), repr(self.x0), self.path.digest() if self.path is not None else "-"]
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


def default_params(utility: str | Utility = "power", **overrides) -> MertonParams:
    """The reference parameter set (r=0.01, rho=0.1, mu=0.03, sigma=0.25, T=1)."""
    if isinstance(utility, str):
        utility = Utility.log() if utility == "log" else Utility.power(0.5)
    return MertonParams(utility=utility, **overrides)


# closed forms -------------------------------------------------------------

def delta(params: MertonParams, t):
    """Squared market price of risk ``(mu(t) - r)**2 / sigma(t)**2``."""
    if params.path is not None:
        return params.path.delta_at(t)
    sig = params.sigma_at(t)
    if np.any(np.asarray(sig) < SIGMA_FLOOR):
        raise DomainError(f"sigma(t) below {SIGMA_FLOOR}")
    return (params.mu_at(t) - params.r) ** 2 / sig**2


def consumption_field(params: MertonParams) -> Field:
    """``h_V(t, u_x) = e^{-rho t} V(c*) - u_x c*`` with exact partials."""
    rho, util = params.rho, params.utility
    if util.kind == "none":
        return Field(lambda p: 0.0, {}, arity=(), name="h_V=0")
    if util.kind == "log":
        def h(p):
            return -np.exp(-rho * p.t) * (np.log(p.ux) + rho * p.t + 1.0)

        partials = {
            ("ux",): lambda p: -np.exp(-rho * p.t) / p.ux,
            ("ux", "ux"): lambda p: np.exp(-rho * p.t) / p.ux**2,
            ("t",): lambda p: rho * np.exp(-rho * p.t) * (np.log(p.ux) + rho * p.t),
            ("t", "ux"): lambda p: rho * np.exp(-rho * p.t) / p.ux,
            ("t", "t"): lambda p: rho**2 * np.exp(-rho * p.t) * (1.0 - np.log(p.ux) - rho * p.t),
        }
        return Field(h, partials, arity=("t", "ux"), name="h_log")
    theta = util.theta
    a = rho / (theta - 1.0)
    k = theta / (theta - 1.0)

    def h(p):
        return -np.exp(a * p.t) * np.power(p.ux, k) / k

    def h_p(p):
        return -np.exp(a * p.t) * np.power(p.ux, k - 1.0)

    partials = {
        ("ux",): h_p,
        ("ux", "ux"): lambda p: -(k - 1.0) * np.exp(a * p.t) * np.power(p.ux, k - 2.0),
        ("t",): lambda p: a * h(p),
        ("t", "ux"): lambda p: a * h_p(p),
        ("t", "t"): lambda p: a * a * h(p),
    }
    return Field(h, partials, arity=("t", "ux"), name=f"h_power({theta:g})")


def h_V(params: MertonParams, t, ux):
    ux = np.asarray(ux, dtype=float)
    if np.any(ux <= 0):
        raise DomainError("h_V requires u_x > 0")
    out = consumption_field(params)(JetPoint(t=t, ux=ux))
    return float(out) if np.ndim(out) == 0 else out


class OptimalControls(NamedTuple):
    c_star: object
    gamma_star: object
    gamma_outside_unit: object


def optimal_controls(params: MertonParams, t, x, ux, uxx, psi_x=None) -> OptimalControls:
    """Interior maximizers of the HJB Hamiltonian; never clamped."""
    x, ux, uxx = (np.asarray(v, dtype=float) for v in (x, ux, uxx))
    if np.any(ux <= 0):
        raise DomainError("optimal controls require u_x > 0")
    if np.any(uxx == 0):
        raise SingularControlError("u_xx = 0 makes the optimal portfolio singular")
    if np.any(x <= 0):
        raise DomainError("optimal controls require x > 0")
    util = params.utility
    if util.kind == "log":
        c = np.exp(-params.rho * np.asarray(t)) / ux
    elif util.kind == "power":
        c = (ux * np.exp(params.rho * np.asarray(t))) ** (1.0 / (util.theta - 1.0))
    else:
        c = np.zeros(np.broadcast(t, ux).shape)
    mu, sig = params.mu_at(t), params.sigma_at(t)
    num = (mu - params.r) * ux
    if psi_x is not None:
        num = num + sig * np.asarray(psi_x, dtype=float)
    gamma = -num / (x * uxx * sig**2)
    outside = (gamma < 0) | (gamma > 1)
    if np.ndim(gamma) == 0:
        return OptimalControls(float(c), float(gamma), bool(outside))
    return OptimalControls(np.broadcast_to(c, gamma.shape), gamma, outside)


def control_objective(params: MertonParams, t, x, ux, uxx, c, gamma):
    """The pre-maximization Hamiltonian evaluated at a given control."""
    mu, sig = params.mu_at(t), params.sigma_at(t)
    return (
        np.exp(-params.rho * np.asarray(t)) * params.utility.V(c)
        + ux * (gamma * (mu - params.r) + params.r) * x
        - ux * c
        + 0.5 * uxx * sig**2 * gamma**2 * x**2
    )


def check_merton_domain(p: JetPoint):
    if np.any(np.asarray(p.ux) <= 0):
        raise DomainError("Merton equation requires u_x > 0")
    if np.any(np.asarray(p.uxx) >= 0):
        raise DomainError("Merton equation requires u_xx < 0 (u_xx = 0 is singular)")


def merton_hamiltonian_field(params: MertonParams) -> Field:
    hv = consumption_field(params)
    r = params.r

    def dl(p):
        return delta(params, p.t)

    def H(p):
        check_merton_domain(p)
        return -0.5 * dl(p) * p.ux**2 / p.uxx + hv(p) + r * p.x * p.ux

    partials = {
        ("x",): lambda p: r * p.ux,
        ("ux",): lambda p: -dl(p) * p.ux / p.uxx + hv.d(p, "ux") + r * p.x,
        ("uxx",): lambda p: 0.5 * dl(p) * p.ux**2 / p.uxx**2,
        ("x", "x"): lambda p: 0.0,
        ("x", "ux"): lambda p: r,
        ("x", "uxx"): lambda p: 0.0,
        ("ux", "ux"): lambda p: -dl(p) / p.uxx + hv.d(p, "ux", "ux"),
        ("ux", "uxx"): lambda p: dl(p) * p.ux / p.uxx**2,
        ("uxx", "uxx"): lambda p: -dl(p) * p.ux**2 / p.uxx**3,
    }
    if params.constant_coefficients:
        partials.update({
            ("t",): lambda p: hv.d(p, "t"),
            ("t", "t"): lambda p: hv.d(p, "t", "t"),
            ("t", "x"): lambda p: 0.0,
            ("t", "ux"): lambda p: hv.d(p, "t", "ux"),
            ("t", "uxx"): lambda p: 0.0,
        })
    return Field(H, partials, arity=("t", "x", "ux", "uxx"), name=f"H_merton[{params.utility.label}]")


def merton_hamiltonian(params: MertonParams, p: JetPoint):
    return merton_hamiltonian_field(params)(p)


def merton_equation(params: MertonParams) -> EvolutionEquation:
    return EvolutionEquation(merton_hamiltonian_field(params),
                             label=f"merton[{params.utility.label}]",
                             check_domain=check_merton_domain)


# value function -----------------------------------------------------------

def _hermite(times, values, slopes):
    return CubicHermiteSpline(times, values, slopes, extrapolate=False)


class ValueFunction:
    """Ansatz solution of the reduced HJB equation.

    Log utility: ``U = a(t) log x + b(t)``.  Power-type utility:
    ``U = f(t) x**theta / theta``.  Time coefficients are cubic Hermite
    interpolants of the RK4 table with slopes taken from the ODE itself.
    """

    def __init__(self, params: MertonParams, times: np.ndarray, coefficients: dict, time_steps: int):
        self.params = params
        self.times = times
        self.kind = "log" if params.utility.kind == "log" else "power"
        self._coef = coefficients
        self.time_steps = time_steps
        self.tag = f"{params.fingerprint()}:{time_steps}"

    def coefficient(self, name, t, nu: int = 0):
        t = self._check_t(t)
        fn = self._coef[name]
        out = fn(t, nu) if callable(fn) and not isinstance(fn, CubicHermiteSpline) else fn(t, nu)
        return float(out) if np.ndim(out) == 0 else out

    def _check_t(self, t):
        t = np.asarray(t, dtype=float)
        tol = 1e-12 * max(1.0, self.params.T)
        if np.any(t < -tol) or np.any(t > self.params.T + tol):
            raise RangeError(f"t outside [0, {self.params.T}]")
        return np.clip(t, 0.0, self.params.T)

    def _parts(self, t, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise DomainError("value function is defined for x > 0")
        return t, x

    def U(self, t, x):
        t, x = self._parts(t, x)
        if self.kind == "log":
            return self.coefficient("a", t) * np.log(x) + self.coefficient("b", t)
        th = self.params.utility.theta
        return self.coefficient("f", t) * x**th / th

    def U_x(self, t, x):
        t, x = self._parts(t, x)
        if self.kind == "log":
            return self.coefficient("a", t) / x
        th = self.params.utility.theta
        return self.coefficient("f", t) * x ** (th - 1.0)

    def U_xx(self, t, x):
        t, x = self._parts(t, x)
        if self.kind == "log":
            return -self.coefficient("a", t) / x**2
        th = self.params.utility.theta
        return self.coefficient("f", t) * (th - 1.0) * x ** (th - 2.0)

    def U_xxx(self, t, x):
        t, x = self._parts(t, x)
        if self.kind == "log":
            return 2.0 * self.coefficient("a", t) / x**3
        th = self.params.utility.theta
        return self.coefficient("f", t) * (th - 1.0) * (th - 2.0) * x ** (th - 3.0)

    def U_t(self, t, x):
        t, x = self._parts(t, x)
        if self.kind == "log":
            return self.coefficient("a", t, 1) * np.log(x) + self.coefficient("b", t, 1)
        th = self.params.utility.theta
        return self.coefficient("f", t, 1) * x**th / th

    def jet(self, t, x) -> JetPoint:
        return JetPoint(t=t, x=x, u=self.U(t, x), ux=self.U_x(t, x), uxx=self.U_xx(t, x),
                        uxxx=self.U_xxx(t, x))

    def pde_residual(self, t, x):
        """``U_t + H(t, x, U_x, U_xx)`` at the given points."""
        return self.U_t(t, x) + merton_hamiltonian(self.params, self.jet(t, x))


def solve_value_function(params: MertonParams, time_steps: int = 256) -> ValueFunction:
    if time_steps < 16:
        raise ValueError("solve_value_function needs time_steps >= 16")
    grid = TimeGrid(0.0, params.T, time_steps)
    times = grid.times
    rho, r, T = params.rho, params.r, params.T
    util = params.utility

    if util.kind == "log":
        if rho > 0:
            def a(t):
                return 1.0 + (np.exp(-rho * t) - np.exp(-rho * T)) / rho
        else:
            def a(t):
                return 1.0 + (T - t)

        def b_rhs(t, y):
            at = a(t)
            return np.exp(-rho * t) * (np.log(at) + rho * t + 1.0) - 0.5 * delta(params, t) * at - r * at

        b = ode_rk4(b_rhs, [0.0], grid, "backward")[:, 0]
        b_slopes = np.array([b_rhs(t, bv) for t, bv in zip(times, b)])
        b_spline = _hermite(times, b, b_slopes)

        def a_fn(t, nu=0):
            if nu == 0:
                return a(t)
            if nu == 1:
                return -np.exp(-rho * t)
            raise ValueError("only first time derivative of a(t) is provided")

        coefs = {"a": a_fn, "b": lambda t, nu=0: b_spline(t, nu)}
        return ValueFunction(params, times, coefs, time_steps)

    theta = util.theta
    k = theta / (theta - 1.0)
    consume = util.kind == "power"

    def f_rhs(t, y):
        f = y[0] if np.ndim(y) else y
        if f <= 0:
            raise ReductionError(f"ansatz coefficient f(t) <= 0 at t={t:.6g}; parameters outside ansatz validity")
        out = theta * (0.5 * delta(params, t) / (theta - 1.0) - r) * f
        if consume:
            out += (theta - 1.0) * math.exp(rho * t / (theta - 1.0)) * f**k
        return np.array([out])

    f = ode_rk4(f_rhs, [1.0], grid, "backward")[:, 0]
    if np.any(f <= 0):
        raise ReductionError("ansatz coefficient f(t) became nonpositive")
    f_slopes = np.array([f_rhs(t, [fv])[0] for t, fv in zip(times, f)])
    f_spline = _hermite(times, f, f_slopes)
    return ValueFunction(params, times, {"f": lambda t, nu=0: f_spline(t, nu)}, time_steps)


# symmetry families --------------------------------------------------------

@dataclass
class SymmetryFamily:
    """A certified generator ``Omega = sum_j c_j(t) B_j(x, u, u_x)``.

    ``basis_names`` label the jet functions ``B_j``; ``coefficients`` holds
    ``c_j`` on ``times``.  The leading entries carry the family's fixed part,
    the remaining ones span the ``G(t, u_x)`` ansatz.
    """

    family: str
    params: MertonParams
    basis_names: list
    times: np.ndarray
    coefficients: np.ndarray
    omega: SmoothField
    report: DeterminingReport | None
    splines: list = dataclasses.field(repr=False, default_factory=list)

    def coefficient(self, name: str, t, nu: int = 0):
        return self.splines[self.basis_names.index(name)](t, nu)

    def perturbed(self, eps: float = 0.01, field: SmoothField | None = None) -> SmoothField:
        """``Omega + eps * field`` (default ``field = u_x``); not re-certified."""
        extra = coordinate("ux") if field is None else field
        return self.omega + eps * extra


def _family_ansatz(family: str, utility: Utility):
    x, u, ux = coordinate("x"), coordinate("u"), coordinate("ux")
    L = log_of("ux")
    if utility.kind == "log":
        g_short = [("1", constant(1.0)), ("log(ux)", L)]
        g_long = g_short + [("log(ux)^2", L * L)]
    elif utility.kind == "power":
        kexp = utility.theta / (utility.theta - 1.0)
        P = power("ux", kexp)
        g_short = [(f"ux^{kexp:g}", P)]
        g_long = g_short + [(f"ux^{kexp:g}*log(ux)", P * L)]
    else:
        g_short, g_long = [], []

    if family == "Omega1":
        fixed = [("(u-x*ux)*log(ux)", u * L - x * ux * L), ("u-x*ux", u - x * ux), ("x*ux", x * ux)]
        basis = fixed + g_long
        terminal = [1.0] + [0.0] * (len(basis) - 1)
    elif family == "Omega2":
        basis = [("-u", -u)] + g_short
        terminal = [1.0] + [0.0] * (len(basis) - 1)
    elif family == "Omega3":
        basis = [("x*ux", x * ux)] + g_short
        terminal = [1.0] + [0.0] * (len(basis) - 1)
    elif family == "Omega4":
        basis = [("1", constant(1.0)), ("ux", ux)]
        terminal = [0.0, 1.0]
    else:
        raise ValueError(f"unknown symmetry family {family!r}; expected one of {FAMILIES}")
    names = [n for n, _ in basis]
    fields = [f for _, f in basis]
    return names, fields, np.array(terminal, dtype=float)


def normalize_family(family) -> str:
    s = str(family).strip()
    for cand in FAMILIES:
        if s.lower() in (cand.lower(), cand[-1], f"omega_{cand[-1]}"):
            return cand
    raise ValueError(f"unknown symmetry family {family!r}; expected one of {FAMILIES}")


def _projection_samples(n: int, seed: int = 20240611) -> JetPoint:
    rng = np.random.default_rng(seed)
    return JetPoint(
        x=rng.uniform(0.5, 2.0, n),
        u=rng.uniform(-5.0, 5.0, n),
        ux=rng.uniform(0.2, 3.0, n),
        uxx=rng.uniform(-3.0, -0.2, n),
        uxxx=rng.uniform(-1.0, 1.0, n),
    )


def _coefficient_grid(params: MertonParams, time_steps: int) -> TimeGrid:
    path = params.path
    if path is None:
        return TimeGrid(0.0, params.T, time_steps)
    nodes = path.times
    steps = np.diff(nodes)
    if abs(nodes[0]) > 1e-12 or nodes[-1] < params.T - 1e-12:
        raise RangeError("coefficient path must cover [0, T]")
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
        raise ValueError("pathwise construction needs a uniform path grid")
    n_path = int(round(params.T / steps[0]))
    refine = max(1, math.ceil(time_steps / n_path))
    return TimeGrid(0.0, params.T, n_path * refine)


def build_symmetry(
    params: MertonParams,
    family,
    value_path: CoefficientPath | None = None,
    time_steps: int = 1024,
    certify: bool = True,
    tolerance: float = 1e-8,
    box: JetSamplingBox | None = None,
) -> SymmetryFamily:
    """Assemble one symmetry family and certify it with the residual oracle.

    The time coefficients are not taken from closed-form ODEs.  For each
    basis function ``B_j`` the residual ``R[B_j]`` (time-independent part) is
    evaluated at sample jets and projected back onto the basis, which gives
    ``R[B_j] = sum_i M_ij(t) B_i``; the coefficients then solve
    ``c' = -M(t) c`` backward from the family's terminal vector.
    """
    family = normalize_family(family)
    if value_path is not None:
        params = params.with_path(value_path)
    eq = merton_equation(params)
    names, fields, terminal = _family_ansatz(family, params.utility)
    nb = len(fields)

    samples = _projection_samples(4 * nb + 16)
    basis_vals = np.stack([np.broadcast_to(f(samples), samples.shape) for f in fields], axis=1)
    if np.linalg.matrix_rank(basis_vals) < nb:
        raise AnsatzMismatchError(f"{family}: basis {names} is rank deficient on the sample jets")
    pinv = np.linalg.pinv(basis_vals)

    grid = _coefficient_grid(params, time_steps)
    stage_times = TimeGrid(0.0, params.T, 2 * grid.N).times
    tt = stage_times[:, None]
    pts = JetPoint(t=tt, x=samples.x[None, :], u=samples.u[None, :], ux=samples.ux[None, :],
                   uxx=samples.uxx[None, :], uxxx=samples.uxxx[None, :])
    # residual of each time-independent basis function at every stage time
    R = np.stack([np.broadcast_to(determining_residual(f, eq, pts), pts.shape) for f in fields], axis=2)
    M = np.einsum("is,tsj->tij", pinv, R)
    fit = np.einsum("si,tij->tsj", basis_vals, M)
    scale = max(1.0, float(np.max(np.abs(R))))
    misfit = float(np.max(np.abs(fit - R)))
    if misfit > 1e-9 * scale:
        raise AnsatzMismatchError(
            f"{family}: residuals are not spanned by the basis {names} (misfit {misfit:.3e})")

    half = grid.h / 2

    def rhs(t, c):
        return -M[int(round(t / half))] @ c

    table = ode_rk4(rhs, terminal, grid, "backward")
    times = grid.times
    slopes = np.array([-M[2 * k] @ table[k] for k in range(grid.N + 1)])
    splines = [_hermite(times, table[:, j], slopes[:, j]) for j in range(nb)]

    omega = None
    for j, (name, f) in enumerate(zip(names, fields)):
        sp = splines[j]
        coef = time_function(lambda t, sp=sp: sp(t), lambda t, sp=sp: sp(t, 1), lambda t, sp=sp: sp(t, 2),
                             name=f"c_{j}(t)")
        term = coef * f
        omega = term if omega is None else omega + term
    omega.name = f"{family}[{params.utility.label}]"

    sym = SymmetryFamily(family, params, names, times, table, omega, None, splines)
    if certify:
        box = box or JetSamplingBox.merton_default(params.T)
        report = residual_scan(omega, eq, box)
        sym.report = report
        if not report.max_abs_residual <= tolerance:
            raise ConstructionError(
                f"{family} failed certification: max residual {report.max_abs_residual:.3e} > {tolerance:g}",
                report,
            )
    return sym
