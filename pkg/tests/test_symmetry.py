import numpy as np
import pytest
import sympy as sp

import oracle
from stochnoether.errors import DomainError, RangeError
from stochnoether.jet import Field, JetPoint, builtin_catalog, constant, coordinate, lie_point_generator, log_of
from stochnoether.merton import (
    MertonParams,
    PathSpec,
    Utility,
    build_symmetry,
    default_params,
    merton_equation,
    merton_hamiltonian_field,
    sample_coefficient_path,
)
from stochnoether.ode import TimeGrid
from stochnoether.symmetry import (
    EvolutionEquation,
    JetSamplingBox,
    determining_residual,
    hj_symmetry_residual,
    merton_determining_system,
    pathwise_scan,
    residual_scan,
    shjb_residual_pathwise,
)

x, u, ux = coordinate("x"), coordinate("u"), coordinate("ux")


def free_particle_equation():
    H = Field(lambda p: 0.5 * p.ux**2, {("ux",): lambda p: p.ux, ("ux", "ux"): lambda p: 1.0},
              arity=("ux",), name="ux^2/2")
    return EvolutionEquation(H, "free particle HJ")


def test_free_particle_translation_is_symmetry():
    pts = JetSamplingBox.merton_default().sample()
    res = determining_residual(ux, free_particle_equation(), pts)
    assert np.max(np.abs(res)) == 0.0


def test_scaling_symmetry_without_consumption_or_interest():
    params = MertonParams(r=0.0, utility=Utility.none(0.5))
    eq = merton_equation(params)
    pts = JetSamplingBox.merton_default().sample()
    assert np.max(np.abs(determining_residual(u, eq, pts))) < 1e-15


def test_dilation_residual_for_power_utility():
    eq = merton_equation(default_params("power"))
    p = JetPoint(t=0.0, x=1.3, u=0.4, ux=1.0, uxx=-0.7, uxxx=0.2)
    assert determining_residual(u, eq, p) == pytest.approx(-2.0, abs=1e-13)


def test_domain_violation_names_constraint():
    eq = merton_equation(default_params())
    with pytest.raises(DomainError, match="u_xx"):
        determining_residual(u, eq, JetPoint(ux=1.0, uxx=0.0))
    with pytest.raises(DomainError, match="u_x"):
        determining_residual(u, eq, JetPoint(ux=-1.0, uxx=-1.0))


@pytest.mark.parametrize("utility", ["log", "power"])
@pytest.mark.parametrize("name", ["u", "x*ux", "u^2", "x^2*u*ux", "sin(x)*u", "exp(0.3t)*x*ux",
                                  "u*log(ux)-x*ux*log(ux)"])
def test_residual_matches_symbolic_oracle(utility, name):
    src = {
        "u": "u", "x*ux": "x*ux", "u^2": "u**2", "x^2*u*ux": "x**2*u*ux", "sin(x)*u": "sin(x)*u",
        "exp(0.3t)*x*ux": "exp(3*t/10)*x*ux", "u*log(ux)-x*ux*log(ux)": "u*log(ux)-x*ux*log(ux)",
    }[name]
    fn, _ = oracle.residual_function(src, 0.01, 0.1, 0.0064, utility, 0.5 if utility == "power" else None)
    pts = JetSamplingBox.merton_default(n=64, seed=4).sample()
    expected = fn(pts.t, pts.x, pts.u, pts.ux, pts.uxx, pts.uxxx)
    got = determining_residual(builtin_catalog()[name], merton_equation(default_params(utility)), pts)
    np.testing.assert_allclose(got, expected, rtol=1e-9, atol=1e-11)


def test_merton_residual_splits_into_three_equations():
    params = default_params("log")
    pts = JetSamplingBox.merton_default(n=128, seed=2).sample()
    eq = merton_equation(params)
    for om in builtin_catalog().values():
        e1, e2, e3 = merton_determining_system(om, params, pts)
        ratio = pts.ux / pts.uxx
        np.testing.assert_allclose(determining_residual(om, eq, pts), e1 + ratio * e2 + ratio**2 * e3,
                                   rtol=1e-10, atol=1e-10)


def test_merton_system_examples():
    params = default_params("power")
    p = JetPoint(t=0.3, x=1.2, u=0.5, ux=1.0, uxx=-0.8)
    sys3 = merton_determining_system(u, params, p)
    assert sys3[1] == 0.0 and sys3[2] == 0.0
    sys3 = merton_determining_system(x * u, params, p)
    assert sys3[2] == pytest.approx(0.0064, abs=1e-15)
    g4 = 0.4 + 1.5 * ux
    sys3 = merton_determining_system(g4, params, p)
    assert sys3[1] == 0.0 and sys3[2] == 0.0


def test_residual_scan_certifies_and_rejects():
    params = default_params("power")
    sym = build_symmetry(params, "Omega3")
    box = JetSamplingBox.merton_default()
    rep = residual_scan(sym.omega, merton_equation(params), box, merton_params=params)
    assert rep.max_abs_residual <= 1e-8
    assert set(rep.per_equation) == {"eq1_max_abs", "eq2_max_abs", "eq3_max_abs"}
    # a visibly broken generator: +0.01*x*u leaves a residual of order delta*u_x
    bad = residual_scan(sym.omega + 0.01 * (x * u), merton_equation(params), box)
    assert bad.max_abs_residual >= 1e-3


def test_constant_generator_scan_is_zero():
    rep = residual_scan(constant(3.0), free_particle_equation(), JetSamplingBox.merton_default())
    assert rep.max_abs_residual == 0.0 and rep.rms_residual == 0.0


def test_report_fields_consistent_and_deterministic():
    params = default_params("log")
    eq = merton_equation(params)
    box = JetSamplingBox.merton_default(n=200, seed=9)
    a = residual_scan(x * u, eq, box)
    b = residual_scan(x * u, eq, box)
    assert a.to_dict() == b.to_dict()
    assert a.max_abs_residual >= a.rms_residual >= 0
    worst = determining_residual(x * u, eq, a.worst_point)
    assert abs(worst) == pytest.approx(a.max_abs_residual, rel=1e-12)


def test_scan_and_box_validation():
    with pytest.raises(ValueError):
        residual_scan(u, free_particle_equation(), JetSamplingBox.merton_default(n=0))
    with pytest.raises(ValueError):
        JetSamplingBox({"t": (0, 1)})
    ranges = dict(JetSamplingBox.merton_default().ranges)
    ranges["uxx"] = (-1.0, 0.5)
    with pytest.raises(ValueError):
        JetSamplingBox(ranges).require_concave_domain()


def test_residual_is_linear_in_generator():
    eq = merton_equation(default_params("power"))
    pts = JetSamplingBox.merton_default(n=100, seed=1).sample()
    cat = builtin_catalog()
    A, B = cat["x^2*u*ux"], cat["u*log(ux)-x*ux*log(ux)"]
    lhs = determining_residual(2.5 * A - 0.7 * B, eq, pts)
    rhs = 2.5 * determining_residual(A, eq, pts) - 0.7 * determining_residual(B, eq, pts)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


def test_hj_symmetry_residual_examples():
    p = JetPoint(x=0.7, ux=1.3)
    H_free = Field(lambda p: 0.5 * p.ux**2, {("ux",): lambda p: p.ux}, arity=("ux",))
    assert hj_symmetry_residual(-1.0 * ux, H_free, p) == 0.0
    H_pot = Field(lambda p: 0.5 * p.ux**2 + p.x, {("ux",): lambda p: p.ux, ("x",): lambda p: 1.0},
                  arity=("x", "ux"))
    assert hj_symmetry_residual(-1.0 * ux, H_pot, p) == pytest.approx(1.0)
    assert hj_symmetry_residual(constant(2.0), H_pot, p) == 0.0


@pytest.mark.parametrize("c,k,gcoef", [(1.0, 0.0, 0.0), (0.0, -1.0, 0.0), (1.0, 0.5, 0.0), (0.0, 0.0, 1.0),
                                        (2.0, -1.0, 0.3)])
@pytest.mark.parametrize("utility", ["none", "power", "log"])
def test_lie_point_consistency(c, k, gcoef, utility):
    # generators c u + g(x) - k x u_x satisfy the affine-diffusion condition f = k x
    params = default_params(utility) if utility != "none" else MertonParams(utility=Utility.none(0.5))
    om = lie_point_generator(k * x, c * u + gcoef * log_of("x"))
    pts = JetSamplingBox.merton_default(n=128, seed=3).sample()
    full = np.abs(determining_residual(om, merton_equation(params), pts))
    split = np.max(np.abs(merton_determining_system(om, params, pts)), axis=0)
    np.testing.assert_array_equal(full <= 1e-12, split <= 1e-12)


def test_pathwise_constant_path_matches_deterministic():
    params = default_params("power")
    grid = TimeGrid(0.0, 1.0, 50)
    path = sample_coefficient_path(PathSpec("constant", mu=0.03, sigma=0.25), grid, params.r)
    pts = JetSamplingBox.merton_default(n=100).sample()
    om = builtin_catalog()["u*log(ux)-x*ux*log(ux)"]
    a = shjb_residual_pathwise(om, params, path, pts)
    b = determining_residual(om, merton_equation(params), pts)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_pathwise_residual_own_and_foreign_path():
    params = default_params("power")
    grid = TimeGrid(0.0, 1.0, 200)
    spec = PathSpec("log-ou", mu=0.03, sigma_mean=0.25, reversion=2.0, vol_of_vol=0.5)
    path_a = sample_coefficient_path(spec, grid, params.r, seed=11)
    path_b = sample_coefficient_path(spec, grid, params.r, seed=12)
    sym = build_symmetry(params, "Omega2", value_path=path_a, certify=False)
    box = JetSamplingBox.merton_default()
    assert pathwise_scan(sym.omega, params, path_a, box).max_abs_residual <= 1e-6
    assert pathwise_scan(sym.omega, params, path_b, box).max_abs_residual >= 1e-3


def test_pathwise_time_outside_grid():
    params = default_params("power")
    path = sample_coefficient_path(PathSpec("constant"), TimeGrid(0.0, 0.5, 10), params.r)
    with pytest.raises(RangeError):
        shjb_residual_pathwise(u, params, path, JetPoint(t=0.9, x=1.0, ux=1.0, uxx=-1.0))
