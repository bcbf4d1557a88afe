"""Symbolic reference computations used to freeze expected values in the tests.

Everything here is built with sympy directly from the definitions and shares
no code with the package under test.
"""
import functools

import sympy as sp

t, x, u, p, q, s = sp.symbols("t x u p q s", real=True)
JET = (t, x, u, p, q, s)


def Dx(F):
    return sp.diff(F, x) + p * sp.diff(F, u) + q * sp.diff(F, p) + s * sp.diff(F, q)


def residual_expr(omega, H):
    """Determining residual of ``omega`` for ``u_t + H = 0``, by brute force."""
    return sp.diff(omega, t) - H * sp.diff(omega, u) + Dx(omega) * sp.diff(H, p) \
        + Dx(Dx(omega)) * sp.diff(H, q) - Dx(H) * sp.diff(omega, p)


def merton_H(r, rho, delta, utility, theta=None):
    r, rho, delta = sp.nsimplify(r), sp.nsimplify(rho), sp.nsimplify(delta)
    if utility == "log":
        h = -sp.exp(-rho * t) * (sp.log(p) + rho * t + 1)
    elif utility == "power":
        th = sp.nsimplify(theta)
        h = -sp.exp(rho * t / (th - 1)) * p ** (th / (th - 1)) * (th - 1) / th
    else:
        h = sp.Integer(0)
    return -delta / 2 * p**2 / q + h + r * x * p


@functools.lru_cache(maxsize=None)
def residual_function(omega_src: str, r, rho, delta, utility, theta=None):
    """Lambdified residual for an omega given as a sympy-parsable string."""
    omega = sp.sympify(omega_src, locals={"t": t, "x": x, "u": u, "ux": p})
    expr = sp.simplify(residual_expr(omega, merton_H(r, rho, delta, utility, theta)))
    return sp.lambdify(JET, expr, "numpy"), expr


def power_reduction_check(theta, r, rho, delta, t0, x0, f0):
    """``U_t + H`` for ``U = f(t) x^theta/theta`` with f' from the Bernoulli ODE; should vanish."""
    th = sp.nsimplify(theta)
    f = sp.Symbol("f", positive=True)
    fprime = th * (sp.nsimplify(delta) / (2 * (th - 1)) - sp.nsimplify(r)) * f \
        + (th - 1) * sp.exp(sp.nsimplify(rho) * t / (th - 1)) * f ** (th / (th - 1))
    U = f * x**th / th
    H = merton_H(r, rho, delta, "power", theta).subs({p: sp.diff(U, x), q: sp.diff(U, x, 2)})
    expr = fprime * x**th / th + H
    return float(expr.subs({t: t0, x: x0, f: f0}).evalf(30))


def log_a0(rho, T):
    rho, T = sp.nsimplify(rho), sp.nsimplify(T)
    return float((1 + (1 - sp.exp(-rho * T)) / rho).evalf(30))
