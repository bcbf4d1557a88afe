"""Conserved quantities along trajectories and tests of their martingale property."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import BasisError, CapabilityError, ProvenanceError
from .jet import JetPoint, SmoothField
from .merton import SymmetryFamily, ValueFunction
from .numerics import PathEnsemble
from .ode import TimeGrid

MAX_EXCLUDED_FRACTION = 1e-3
TRIM = 0.05


@dataclass
class ConservedSeries:
    grid: TimeGrid
    values: np.ndarray  # M x (N+1); excluded paths hold NaN
    valid: np.ndarray  # per-path mask
    family: str
    params_fingerprint: str
    seed: int
    wealth: np.ndarray | None = None
    noise_refinement: int = 1

    @property
    def n_excluded(self) -> int:
        return int(self.valid.size - np.count_nonzero(self.valid))

    @property
    def M(self) -> int:
        return self.values.shape[0]


def series_from_array(values, grid: TimeGrid | None = None, label: str = "array", wealth=None,
                      seed: int = 0) -> ConservedSeries:
    """Wrap a raw ``M x (N+1)`` array (e.g. synthetic martingales) as a series."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ValueError("series values must be a 2-d array (paths x time nodes)")
    if grid is None:
        grid = TimeGrid(0.0, 1.0, max(values.shape[1] - 1, 1))
    return ConservedSeries(grid, values, np.ones(values.shape[0], dtype=bool), label, "-", seed, wealth)


def evaluate_conserved(sym: SymmetryFamily | SmoothField, U: ValueFunction, ensemble: PathEnsemble,
                       omega: SmoothField | None = None) -> ConservedSeries:
    """``O_{i,k} = Omega(t_k, X_ik, U, U_x)`` on every simulated node.

    ``omega`` overrides the family's generator (used for perturbed controls)
    while keeping the family's provenance.
    """
    if ensemble.policy_tag != U.tag:
        raise ProvenanceError(
            f"ensemble was generated by policy {ensemble.policy_tag!r}, not by value function {U.tag!r}")
    if ensemble.params_fingerprint != U.params.fingerprint():
        raise ProvenanceError("ensemble parameters differ from the value function's parameters")
    if isinstance(sym, SymmetryFamily):
        if sym.params.fingerprint() != U.params.fingerprint():
            raise ProvenanceError("symmetry family was built for different parameters")
        family = sym.family
        field_ = omega or sym.omega
    else:
        family = getattr(sym, "name", "omega")
        field_ = omega or sym

    X = ensemble.wealth
    t = ensemble.grid.times[None, :]
    ux = U.U_x(t, X)
    bad = ~(ux > 0)
    valid = ~bad.any(axis=1)
    values = np.full(X.shape, np.nan)
    if valid.any():
        Xv, uxv = X[valid], ux[valid]
        tv = np.broadcast_to(t, Xv.shape)
        pt = JetPoint(t=tv, x=Xv, u=U.U(tv, Xv), ux=uxv, uxx=U.U_xx(tv, Xv))
        values[valid] = np.broadcast_to(field_(pt), Xv.shape)
    return ConservedSeries(ensemble.grid, values, valid, family, U.params.fingerprint(), ensemble.base_seed,
                           ensemble.wealth, ensemble.noise_refinement)


@dataclass
class MartingaleReport:
    times: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    drift_z: np.ndarray
    max_abs_z: float
    trimmed_mean: np.ndarray
    trimmed_drift_z: np.ndarray
    n_valid_paths: int
    n_excluded: int
    z_crit: float
    verdict: str
    bias_slope: float | None = None
    bias_slope_z: float | None = None
    extrapolated: bool = False
    paired: bool = False
    raw_max_abs_z: float | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "max_abs_z": self.max_abs_z,
            "raw_max_abs_z": self.raw_max_abs_z,
            "z_crit": self.z_crit,
            "bias_slope": self.bias_slope,
            "bias_slope_z": self.bias_slope_z,
            "extrapolated": self.extrapolated,
            "paired_half_step": self.paired,
            "n_valid_paths": self.n_valid_paths,
            "n_excluded": self.n_excluded,
            "final_mean": float(self.mean[-1]),
            "initial_mean": float(self.mean[0]),
            "max_abs_trimmed_z": float(np.max(np.abs(self.trimmed_drift_z))),
            "notes": list(self.notes),
        }


def _moments(v):
    m = v.mean(axis=0)
    s = v.std(axis=0, ddof=1) / np.sqrt(v.shape[0])
    return m, s


def _drift_z(m, s, atol=0.0):
    den = np.sqrt(s**2 + s[0] ** 2 + atol**2)
    diff = m - m[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(den > 0, diff / den, np.where(diff == 0, 0.0, np.inf * np.sign(diff)))
    return z


def _trimmed(v):
    m = stats.trim_mean(v, TRIM, axis=0)
    # winsorized-variance standard error of the trimmed mean
    lo, hi = np.quantile(v, [TRIM, 1 - TRIM], axis=0)
    w = np.clip(v, lo, hi)
    s = w.std(axis=0, ddof=1) / ((1 - 2 * TRIM) * np.sqrt(v.shape[0]))
    return m, s


def martingale_mean_test(series: ConservedSeries, z_crit: float = 4.0,
                         half_step_series: ConservedSeries | None = None,
                         resolution: float = 1e-9) -> MartingaleReport:
    """Test that the per-node mean of the series stays at its initial value.

    With a half-step rerun the drift is extrapolated to zero step size by
    Richardson, ``E = 2 O_fine(t_k) - O_coarse(t_k)``.  When both runs were
    driven by the same Brownian paths the extrapolation is done path by path
    and standard errors come from the extrapolated values; otherwise the two
    runs are treated as independent.

    ``resolution`` (relative to ``max(1, |m_0|)``) is the accuracy to which
    the series itself is computed; it enters the z denominator so that a
    deterministic series is not failed on rounding-level wobble.
    """
    vals = series.values[series.valid]
    if vals.shape[0] < 100:
        raise ValueError("martingale_mean_test needs at least 100 valid paths")
    if vals.shape[1] < 2:
        raise ValueError("series has a single time node; nothing to test")
    notes = []
    m, s = _moments(vals)
    atol = resolution * max(1.0, abs(float(m[0])))
    z_raw = _drift_z(m, s, atol)
    tm, ts = _trimmed(vals)
    tz = _drift_z(tm, ts, atol)
    n_excl = series.n_excluded
    report_m, report_s, report_z = m, s, z_raw
    slope = slope_z = None
    paired = False
    if half_step_series is not None:
        N = vals.shape[1] - 1
        fine = half_step_series
        Nf = fine.values.shape[1] - 1
        if Nf != 2 * N:
            raise ValueError("half-step series must have exactly twice as many steps")
        f_on_coarse = fine.values[:, ::2]
        h = series.grid.h
        paired = (fine.seed == series.seed and fine.values.shape[0] == series.values.shape[0]
                  and series.noise_refinement == 2 * fine.noise_refinement)
        if paired:
            both = series.valid & fine.valid
            n_excl = int(both.size - np.count_nonzero(both))
            E = 2.0 * f_on_coarse[both] - series.values[both]
            report_m, report_s = _moments(E)
            D = f_on_coarse[both] - series.values[both]
            dm, ds = _moments(D - D[:, :1])
        else:
            fv = f_on_coarse[fine.valid]
            fm, fs = _moments(fv)
            report_m = 2 * fm - m
            report_s = np.sqrt(4 * fs**2 + s**2)
            n_excl = max(n_excl, fine.n_excluded)
            dm = (fm - fm[0]) - (m - m[0])
            ds = np.sqrt(fs**2 + fs[0] ** 2 + s**2 + s[0] ** 2)
            notes.append("half-step run not path-coupled; independent-run errors used")
        report_z = _drift_z(report_m, report_s, atol)
        # coarse drift minus fine drift = beta * (h - h/2)
        k = int(np.argmax(np.abs(dm)))
        slope = float(dm[-1] / (h / 2 - h)) if dm.size else 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            slope_z = float(dm[-1] / ds[-1]) if ds[-1] > 0 else 0.0
        notes.append(f"largest coarse-vs-fine drift gap at node {k}")
    max_z = float(np.max(np.abs(report_z)))
    n_valid = int(series.values.shape[0] - n_excl)
    if n_excl > MAX_EXCLUDED_FRACTION * series.values.shape[0]:
        verdict = "inconclusive"
        notes.append(f"{n_excl} paths excluded (u_x <= 0), above the {MAX_EXCLUDED_FRACTION:.1%} limit")
    else:
        verdict = "pass" if max_z <= z_crit else "fail"
    return MartingaleReport(
        times=series.grid.times,
        mean=report_m,
        stderr=report_s,
        drift_z=report_z,
        max_abs_z=max_z,
        trimmed_mean=tm,
        trimmed_drift_z=tz,
        n_valid_paths=n_valid,
        n_excluded=n_excl,
        z_crit=z_crit,
        verdict=verdict,
        bias_slope=slope,
        bias_slope_z=slope_z,
        extrapolated=half_step_series is not None,
        paired=paired,
        raw_max_abs_z=float(np.max(np.abs(z_raw))),
        notes=notes,
    )


@dataclass
class IncrementReport:
    coefficients: np.ndarray
    stderr: np.ndarray
    z: np.ndarray
    z_crit: float
    verdict: str
    n_obs: int

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "coefficients": self.coefficients.tolist(),
            "stderr": self.stderr.tolist(),
            "z": self.z.tolist(),
            "z_crit": self.z_crit,
            "n_obs": self.n_obs,
        }


def martingale_increment_test(series: ConservedSeries, wealth=None, z_crit: float = 4.0) -> IncrementReport:
    """Regress ``O_{k+1} - O_k`` on ``[1, X_k, X_k**2]``, pooled, HC0 errors."""
    wealth = series.wealth if wealth is None else np.asarray(wealth, dtype=float)
    if wealth is None:
        raise ValueError("increment test needs the concurrent wealth paths")
    O = series.values[series.valid]
    X = wealth[series.valid]
    if O.shape[1] < 2:
        raise BasisError("series has a single time node: no increments to regress")
    dO = np.diff(O, axis=1).ravel()
    x = X[:, :-1].ravel()
    A = np.stack([np.ones_like(x), x, x * x], axis=1)
    XtX = A.T @ A
    if np.linalg.matrix_rank(XtX) < A.shape[1]:
        raise BasisError("increment regression design is rank deficient")
    inv = np.linalg.inv(XtX)
    beta = inv @ (A.T @ dO)
    resid = dO - A @ beta
    meat = (A * resid[:, None] ** 2).T @ A
    cov = inv @ meat @ inv
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, beta / se, np.where(beta == 0, 0.0, np.inf))
    verdict = "pass" if np.all(np.abs(z) <= z_crit) else "fail"
    return IncrementReport(beta, se, z, z_crit, verdict, int(dO.size))


def deterministic_constancy_check(quantity) -> float:
    q = np.asarray(quantity, dtype=float)
    if q.size == 0:
        return 0.0
    return float(np.max(np.abs(q - q.flat[0])))


def tilde_correction(omega: SmoothField, U: ValueFunction, psi: SmoothField, ensemble: PathEnsemble,
                     path: int = 0, sigma=None):
    """Correction of the conserved quantity by the noise field ``Psi``.

    Returns ``(O, O_tilde)`` along one path, where
    ``O_tilde = O - 1/2 * int I ds`` by the trapezoid rule and ``I`` is the
    one-dimensional integrand with ``sig = sigma(t) gamma x`` (state
    diffusion) and ``sig_x = sigma(t) gamma`` at the applied control.
    """
    if not psi.has_partial("x"):
        raise CapabilityError(f"{psi.name} lacks the x-partial needed for the correction")
    if ensemble.gamma.shape[1] == 0:
        raise ValueError("ensemble was simulated without stored controls")
    grid = ensemble.grid
    t = grid.times
    X = ensemble.wealth[path]
    gam = np.append(ensemble.gamma[path], ensemble.gamma[path, -1])
    sig_t = U.params.sigma_at(t) if sigma is None else np.broadcast_to(np.asarray(sigma, float), t.shape)
    p = JetPoint(t=t, x=X, u=U.U(t, X), ux=U.U_x(t, X), uxx=U.U_xx(t, X))
    O = np.broadcast_to(omega(p), t.shape).astype(float)
    s_hat = sig_t * gam * X
    s_hat_x = sig_t * gam
    Ps = np.broadcast_to(psi(p), t.shape)
    Px = np.broadcast_to(psi.d(p, "x"), t.shape)
    ux, uxx = p.ux, p.uxx
    d = omega.d
    integrand = (
        d(p, "u", "u") * (Ps**2 + 2 * ux * s_hat * Ps)
        - d(p, "x", "u") * s_hat * Ps
        - d(p, "ux") * s_hat_x * Px
        + d(p, "x", "ux") * s_hat * Px
        + d(p, "ux", "ux") * (Px**2 + 2 * s_hat * ux * Px)
        + d(p, "u", "ux") * (Ps * Px + s_hat * ux * Px + s_hat * uxx * Ps)
    )
    acc = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(t))])
    return O, O - 0.5 * acc
