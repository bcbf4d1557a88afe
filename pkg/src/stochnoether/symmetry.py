"""Determining-equation residuals for contact symmetries of evolution equations.

An evolution equation ``u_t + H(t, x, u, u_x, u_xx) = 0`` admits the contact
symmetry generated by ``Omega(t, x, u, u_x)`` exactly when

    Omega_t - H Omega_u + D_x(Omega) H_ux + D_xx(Omega) H_uxx - D_x(H) Omega_ux

vanishes identically on the jet.  :func:`determining_residual` evaluates that
expression pointwise; :func:`residual_scan` samples it over a box.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import RangeError
from .jet import JetPoint, SmoothField, total_derivative_x, total_derivative_xx

JET_NAMES = ("t", "x", "u", "ux", "uxx", "uxxx")


@dataclass(frozen=True)
class EvolutionEquation:
    """The equation ``u_t + H = 0``."""

    H: SmoothField
    label: str = "u_t + H = 0"
    check_domain: Callable[[JetPoint], None] | None = None


@dataclass(frozen=True)
class JetSamplingBox:
    """Axis-aligned box of jet points sampled uniformly with a fixed seed."""

    ranges: dict
    n: int = 512
    seed: int = 0

    def __post_init__(self):
        missing = set(JET_NAMES) - set(self.ranges)
        if missing:
            raise ValueError(f"sampling box lacks ranges for {sorted(missing)}")
        for name in JET_NAMES:
            lo, hi = self.ranges[name]
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"empty or invalid range for {name}: ({lo}, {hi})")

    @classmethod
    def merton_default(cls, T: float = 1.0, n: int = 512, seed: int = 0) -> "JetSamplingBox":
        return cls(
            {
                "t": (0.0, T),
                "x": (0.5, 2.0),
                "u": (-5.0, 5.0),
                "ux": (0.2, 3.0),
                "uxx": (-3.0, -0.2),
                "uxxx": (-1.0, 1.0),
            },
            n=n,
            seed=seed,
        )

    def require_concave_domain(self):
        """Check ``u_x > 0`` and ``u_xx < 0`` on the whole box."""
        if self.ranges["ux"][0] <= 0:
            raise ValueError("u_x range must lie in (0, inf)")
        if self.ranges["uxx"][1] >= 0:
            raise ValueError("u_xx range must lie in (-inf, 0)")

    def sample(self) -> JetPoint:
        if self.n <= 0:
            raise ValueError("sampling box needs a positive sample count")
        rng = np.random.default_rng(self.seed)
        cols = {}
        for name in JET_NAMES:
            lo, hi = self.ranges[name]
            cols[name] = rng.uniform(lo, hi, size=self.n)
        return JetPoint(**cols)


@dataclass
class DeterminingReport:
    n_points: int
    max_abs_residual: float
    rms_residual: float
    worst_point: JetPoint
    per_equation: dict | None = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        wp = self.worst_point
        out = {
            "label": self.label,
            "n_points": self.n_points,
            "max_abs_residual": self.max_abs_residual,
            "rms_residual": self.rms_residual,
            "worst_point": {name: wp.get(name) for name in JET_NAMES},
        }
        if self.per_equation is not None:
            out["per_equation"] = self.per_equation
        out.update(self.extra)
        return out


def determining_residual(omega: SmoothField, eq: EvolutionEquation, p: JetPoint):
    if eq.check_domain is not None:
        eq.check_domain(p)
    H = eq.H
    return (
        omega.d(p, "t")
        - H(p) * omega.d(p, "u")
        + total_derivative_x(omega, p) * H.d(p, "ux")
        + total_derivative_xx(omega, p) * H.d(p, "uxx")
        - total_derivative_x(H, p) * omega.d(p, "ux")
    )


def summarize_residuals(res, points: JetPoint, label: str = "", per_equation=None) -> DeterminingReport:
    res = np.atleast_1d(np.asarray(res, dtype=float))
    absres = np.abs(res)
    worst = int(np.argmax(absres))
    return DeterminingReport(
        n_points=res.size,
        max_abs_residual=float(absres[worst]),
        rms_residual=float(np.sqrt(np.mean(res * res))),
        worst_point=points.take(worst),
        per_equation=per_equation,
        label=label,
    )


def residual_scan(omega: SmoothField, eq: EvolutionEquation, box: JetSamplingBox,
                  merton_params=None) -> DeterminingReport:
    """Evaluate the determining residual on ``box.n`` seeded uniform samples.

    With ``merton_params`` the report also carries the maxima of the three
    Merton determining equations.
    """
    if box.n <= 0:
        raise ValueError("residual_scan needs at least one sample point")
    pts = box.sample()
    res = determining_residual(omega, eq, pts)
    per_eq = None
    if merton_params is not None:
        sys3 = merton_determining_system(omega, merton_params, pts)
        per_eq = {f"eq{i + 1}_max_abs": float(np.max(np.abs(sys3[i]))) for i in range(3)}
    return summarize_residuals(res, pts, label=f"{omega.name} | {eq.label}", per_equation=per_eq)


def hj_symmetry_residual(omega: SmoothField, H: SmoothField, p: JetPoint):
    """Poisson-bracket condition ``Omega_x H_ux - Omega_ux H_x`` for first-order HJ."""
    return omega.d(p, "x") * H.d(p, "ux") - omega.d(p, "ux") * H.d(p, "x")


def merton_determining_system(omega: SmoothField, params, p: JetPoint) -> np.ndarray:
    """The three coefficient equations of the Merton determining condition.

    The full residual equals ``e1 + (u_x/u_xx) e2 + (u_x/u_xx)**2 e3``.
    """
    from .merton import check_merton_domain, consumption_field, delta

    check_merton_domain(p)
    hv = consumption_field(params)
    d = delta(params, p.t)
    r = params.r
    ux = p.ux
    K = hv(p) + r * p.x * ux
    K_ux = hv.d(p, "ux") + r * p.x
    K_x = r * ux
    e1 = (
        0.5 * d * ux**2 * omega.d(p, "ux", "ux")
        + ux * omega.d(p, "u") * K_ux
        + omega.d(p, "x") * K_ux
        - omega.d(p, "u") * K
        - omega.d(p, "ux") * K_x
        + omega.d(p, "t")
    )
    e2 = d * ux**2 * omega.d(p, "u", "ux") + d * ux * omega.d(p, "x", "ux") - d * omega.d(p, "x")
    e3 = 0.5 * d * ux**2 * omega.d(p, "u", "u") + d * ux * omega.d(p, "x", "u") + 0.5 * d * omega.d(p, "x", "x")
    return np.stack(np.broadcast_arrays(e1, e2, e3))


def shjb_residual_pathwise(omega: SmoothField, params, path, p: JetPoint):
    """Determining condition with ``H^S(..., psi_x = 0)`` read off one coefficient path."""
    from .merton import merton_equation

    t = np.asarray(p.t)
    lo, hi = path.times[0], path.times[-1]
    tol = 1e-12 * max(1.0, abs(hi))
    if np.any(t < lo - tol) or np.any(t > hi + tol):
        raise RangeError(f"t outside the coefficient path grid [{lo}, {hi}]")
    return determining_residual(omega, merton_equation(params.with_path(path)), p)


def pathwise_scan(omega: SmoothField, params, path, box: JetSamplingBox) -> DeterminingReport:
    pts = box.sample()
    res = shjb_residual_pathwise(omega, params, path, pts)
    return summarize_residuals(res, pts, label=f"{omega.name} | pathwise[{path.provenance}]")
