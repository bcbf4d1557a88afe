"""Scalar third-order jet coordinates, smooth jet fields and total derivatives.

A :class:`JetPoint` carries ``(t, x, u, u_x, u_xx, u_xxx)``.  Coordinates may
be floats or equally-shaped numpy arrays; every operation here is elementwise,
so a whole sample of points is evaluated in one call.

Fields are functions of ``(t, x, u, ux, uxx)`` that expose partial derivatives
up to second order.  Derivatives are addressed by coordinate names, e.g.
``field.d(p, "u", "ux")`` is the mixed second partial in ``u`` and ``u_x``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, Mapping

import numpy as np

from .errors import CapabilityError, DomainError, NumericDomainError, StencilError

COORDS = ("t", "x", "u", "ux", "uxx")
_ORDER = {name: i for i, name in enumerate(COORDS)}
_EPS = np.finfo(float).eps


def partial_key(*names: str) -> tuple[str, ...]:
    """Canonical (sorted) key for a partial derivative."""
    for n in names:
        if n not in _ORDER:
            raise KeyError(f"unknown jet coordinate {n!r}")
    if not 1 <= len(names) <= 2:
        raise ValueError("only first and second partials are supported")
    return tuple(sorted(names, key=_ORDER.__getitem__))


@dataclass(frozen=True)
class JetPoint:
    """One point (or an array of points) of the scalar third-order jet."""

    t: float = 0.0
    x: float = 0.0
    u: float = 0.0
    ux: float = 0.0
    uxx: float = 0.0
    uxxx: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = np.asarray(getattr(self, f.name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise DomainError(f"jet coordinate {f.name} is not finite")
            object.__setattr__(self, f.name, float(v) if v.ndim == 0 else v)

    def get(self, name: str):
        return getattr(self, name)

    def replace(self, **changes) -> "JetPoint":
        return dataclasses.replace(self, **changes)

    @property
    def shape(self) -> tuple[int, ...]:
        return np.broadcast(self.t, self.x, self.u, self.ux, self.uxx, self.uxxx).shape

    def zeros(self):
        shape = self.shape
        return np.zeros(shape) if shape else 0.0

    def take(self, index) -> "JetPoint":
        """Select one point out of an array-valued JetPoint."""
        shape = self.shape
        vals = {
            f.name: float(np.broadcast_to(getattr(self, f.name), shape)[index])
            for f in dataclasses.fields(self)
        }
        return JetPoint(**vals)


class SmoothField:
    """Scalar function of jet coordinates with partials up to second order.

    Subclasses implement :meth:`value`, :meth:`_partial` and
    :meth:`available`.  Partials with respect to coordinates outside
    ``arity`` are identically zero and never reach ``_partial``.
    """

    arity: frozenset
    exact: bool = True
    name: str = "field"

    def value(self, p: JetPoint):
        raise NotImplementedError

    def _partial(self, p: JetPoint, key: tuple[str, ...]):
        raise NotImplementedError

    def available(self, key: tuple[str, ...]) -> bool:
        raise NotImplementedError

    def __call__(self, p: JetPoint):
        return self.value(p)

    def d(self, p: JetPoint, *names: str):
        key = partial_key(*names)
        if not set(key) <= self.arity:
            return p.zeros()
        return self._partial(p, key)

    def has_partial(self, *names: str) -> bool:
        key = partial_key(*names)
        return not set(key) <= self.arity or self.available(key)

    def declared_keys(self) -> list[tuple[str, ...]]:
        coords = [c for c in COORDS if c in self.arity]
        keys = [(c,) for c in coords]
        keys += [partial_key(a, b) for a, b in combinations_with_replacement(coords, 2)]
        return [k for k in keys if self.available(k)]

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return _Sum(self, as_field(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _Sum(self, _Scaled(-1.0, as_field(other)))

    def __rsub__(self, other):
        return _Sum(as_field(other), _Scaled(-1.0, self))

    def __neg__(self):
        return _Scaled(-1.0, self)

    def __mul__(self, other):
        if isinstance(other, SmoothField):
            return _Product(self, other)
        return _Scaled(float(other), self)

    __rmul__ = __mul__

    def __repr__(self):
        kind = "exact" if self.exact else "finite-difference"
        return f"<{type(self).__name__} {self.name} arity={sorted(self.arity, key=_ORDER.get)} {kind}>"


class Field(SmoothField):
    """Field given by a value function and a table of partial functions."""

    def __init__(
        self,
        value: Callable[[JetPoint], object],
        partials: Mapping[tuple[str, ...], Callable[[JetPoint], object]] | None = None,
        arity=COORDS,
        exact: bool = True,
        name: str = "field",
    ):
        self.arity = frozenset(arity)
        bad = self.arity - set(COORDS)
        if bad:
            raise KeyError(f"unknown coordinates in arity: {sorted(bad)}")
        self._value = value
        self._partials = {}
        for key, fn in (partials or {}).items():
            key = partial_key(*key) if isinstance(key, tuple) else partial_key(key)
            if set(key) <= self.arity:
                self._partials[key] = fn
        self.exact = exact
        self.name = name

    def value(self, p):
        return _broadcast(self._value(p), p)

    def _partial(self, p, key):
        try:
            fn = self._partials[key]
        except KeyError:
            raise CapabilityError(f"{self.name} has no partial d/d{'d/d'.join(key)}") from None
        return _broadcast(fn(p), p)

    def available(self, key):
        return key in self._partials


class _Sum(SmoothField):
    def __init__(self, a, b):
        self.a, self.b = a, b
        self.arity = a.arity | b.arity
        self.exact = a.exact and b.exact
        self.name = f"({a.name} + {b.name})"

    def value(self, p):
        return self.a(p) + self.b(p)

    def _partial(self, p, key):
        return self.a.d(p, *key) + self.b.d(p, *key)

    def available(self, key):
        return all(f.has_partial(*key) for f in (self.a, self.b))


class _Scaled(SmoothField):
    def __init__(self, c, a):
        self.c, self.a = c, a
        self.arity = a.arity
        self.exact = a.exact
        self.name = f"{c:g}*{a.name}"

    def value(self, p):
        return self.c * self.a(p)

    def _partial(self, p, key):
        return self.c * self.a.d(p, *key)

    def available(self, key):
        return self.a.has_partial(*key)


class _Product(SmoothField):
    def __init__(self, a, b):
        self.a, self.b = a, b
        self.arity = a.arity | b.arity
        self.exact = a.exact and b.exact
        self.name = f"{a.name}*{b.name}"

    def value(self, p):
        return self.a(p) * self.b(p)

    def _partial(self, p, key):
        a, b = self.a, self.b
        if len(key) == 1:
            return a.d(p, *key) * b(p) + a(p) * b.d(p, *key)
        i, j = key
        return (
            a.d(p, i, j) * b(p)
            + a.d(p, i) * b.d(p, j)
            + a.d(p, j) * b.d(p, i)
            + a(p) * b.d(p, i, j)
        )

    def available(self, key):
        needed = [key] + ([(k,) for k in key] if len(key) == 2 else [])
        return all(f.has_partial(*k) for f in (self.a, self.b) for k in needed)


def _broadcast(v, p):
    shape = p.shape
    if shape and np.ndim(v) == 0:
        return np.full(shape, float(v))
    return v


# constructors -------------------------------------------------------------

def as_field(obj) -> SmoothField:
    if isinstance(obj, SmoothField):
        return obj
    return constant(float(obj))


def constant(c: float) -> Field:
    return Field(lambda p: c, {}, arity=(), name=f"{c:g}")


def coordinate(name: str) -> Field:
    return Field(lambda p: p.get(name), {(name,): lambda p: 1.0, (name, name): lambda p: 0.0},
                 arity=(name,), name=name)


def power(name: str, a: float) -> Field:
    """``coord**a``; non-integer exponents need a positive coordinate."""
    return Field(
        lambda p: np.power(p.get(name), a),
        {
            (name,): lambda p: a * np.power(p.get(name), a - 1.0),
            (name, name): lambda p: a * (a - 1.0) * np.power(p.get(name), a - 2.0),
        },
        arity=(name,),
        name=f"{name}^{a:g}",
    )


def log_of(name: str) -> Field:
    return Field(
        lambda p: np.log(p.get(name)),
        {(name,): lambda p: 1.0 / p.get(name), (name, name): lambda p: -1.0 / p.get(name) ** 2},
        arity=(name,),
        name=f"log({name})",
    )


def exp_of(name: str, scale: float = 1.0) -> Field:
    def f(p):
        return np.exp(scale * p.get(name))

    return Field(
        f,
        {(name,): lambda p: scale * f(p), (name, name): lambda p: scale * scale * f(p)},
        arity=(name,),
        name=f"exp({scale:g}*{name})",
    )


def sin_of(name: str) -> Field:
    return Field(
        lambda p: np.sin(p.get(name)),
        {(name,): lambda p: np.cos(p.get(name)), (name, name): lambda p: -np.sin(p.get(name))},
        arity=(name,),
        name=f"sin({name})",
    )


def time_function(f, df, d2f=None, name: str = "c(t)") -> Field:
    """Field depending on ``t`` only, e.g. a tabulated ODE coefficient."""
    partials = {("t",): lambda p: df(p.t)}
    if d2f is not None:
        partials[("t", "t")] = lambda p: d2f(p.t)
    return Field(lambda p: f(p.t), partials, arity=("t",), name=name)


def builtin_catalog() -> dict[str, SmoothField]:
    """Exact fields used to exercise the jet calculus."""
    x, u, ux = coordinate("x"), coordinate("u"), coordinate("ux")
    return {
        "u": u,
        "x*ux": x * ux,
        "u^2": u * u,
        "exp(ux)": exp_of("ux"),
        "log(ux)": log_of("ux"),
        "ux^1.5": power("ux", 1.5),
        "x^2*u*ux": x * x * u * ux,
        "sin(x)*u": sin_of("x") * u,
        "exp(0.3t)*x*ux": exp_of("t", 0.3) * x * ux,
        "u*log(ux)-x*ux*log(ux)": u * log_of("ux") - x * ux * log_of("ux"),
    }


# finite differences -------------------------------------------------------

def fd_partials(eval_fn: Callable[[JetPoint], object], arity, name: str = "fd-field") -> Field:
    """Wrap a bare evaluator with central-difference partials."""
    arity = tuple(c for c in COORDS if c in set(arity))

    def call(p, where):
        try:
            return np.asarray(eval_fn(p), dtype=float)
        except Exception as exc:  # re-raised with the stencil location
            raise StencilError(f"{name}: evaluation failed at stencil point {where}") from exc

    def step(p, c, e):
        return e * np.maximum(1.0, np.abs(p.get(c)))

    def first(c):
        def fn(p):
            h = step(p, c, _EPS ** (1 / 3))
            v = p.get(c)
            fp = call(p.replace(**{c: v + h}), f"{c}+h")
            fm = call(p.replace(**{c: v - h}), f"{c}-h")
            return (fp - fm) / (2 * h)
        return fn

    def second(a, b):
        def fn(p):
            if a == b:
                h = step(p, a, _EPS ** 0.25)
                v = p.get(a)
                fp = call(p.replace(**{a: v + h}), f"{a}+h")
                f0 = call(p, "center")
                fm = call(p.replace(**{a: v - h}), f"{a}-h")
                return (fp - 2 * f0 + fm) / (h * h)
            ha, hb = step(p, a, _EPS ** 0.25), step(p, b, _EPS ** 0.25)
            va, vb = p.get(a), p.get(b)
            tot = 0.0
            for sa in (1, -1):
                for sb in (1, -1):
                    q = p.replace(**{a: va + sa * ha, b: vb + sb * hb})
                    tot = tot + sa * sb * call(q, f"{a}{'+' if sa > 0 else '-'}h,{b}{'+' if sb > 0 else '-'}h")
            return tot / (4 * ha * hb)
        return fn

    partials = {(c,): first(c) for c in arity}
    for a, b in combinations_with_replacement(arity, 2):
        partials[(a, b)] = second(a, b)
    return Field(lambda p: call(p, "center"), partials, arity=arity, exact=False, name=name)


# total derivatives --------------------------------------------------------

def _checked_sum(terms, what):
    total = 0.0
    for label, val in terms:
        if not np.all(np.isfinite(val)):
            raise NumericDomainError(f"{what}: non-finite term {label}")
        total = total + val
    if not np.all(np.isfinite(total)):
        raise NumericDomainError(f"{what}: non-finite result")
    return total


def total_derivative_x(F: SmoothField, p: JetPoint):
    """``D_x F = F_x + u_x F_u + u_xx F_ux + u_xxx F_uxx``; ``t`` is a parameter."""
    terms = [("dF/dx", F.d(p, "x")), ("u_x*dF/du", p.ux * F.d(p, "u")),
             ("u_xx*dF/du_x", p.uxx * F.d(p, "ux"))]
    if "uxx" in F.arity:
        terms.append(("u_xxx*dF/du_xx", p.uxxx * F.d(p, "uxx")))
    return _checked_sum(terms, f"D_x {F.name}")


def total_derivative_xx(F: SmoothField, p: JetPoint):
    """``D_x(D_x F)`` in expanded form for a first-order field ``F``."""
    if "uxx" in F.arity:
        raise CapabilityError("D_xx needs a field of (t, x, u, u_x) only")
    q, s, ux = p.uxx, p.uxxx, p.ux
    terms = [
        ("F_xx", F.d(p, "x", "x")),
        ("2u_x F_xu", 2 * ux * F.d(p, "x", "u")),
        ("2u_xx F_x,ux", 2 * q * F.d(p, "x", "ux")),
        ("u_x^2 F_uu", ux * ux * F.d(p, "u", "u")),
        ("2u_x u_xx F_u,ux", 2 * ux * q * F.d(p, "u", "ux")),
        ("u_xx^2 F_ux,ux", q * q * F.d(p, "ux", "ux")),
        ("u_xx F_u", q * F.d(p, "u")),
        ("u_xxx F_ux", s * F.d(p, "ux")),
    ]
    return _checked_sum(terms, f"D_xx {F.name}")


# contact vector fields ----------------------------------------------------

_FIRST_ORDER = frozenset(("t", "x", "u", "ux"))


@dataclass(frozen=True)
class ContactVector:
    """First-order components of the contact field generated by ``generator``."""

    Y_x: SmoothField
    Y_u: SmoothField
    Y_ux: SmoothField
    generator: SmoothField

    def uxx_component(self, p: JetPoint):
        """Second-order component, evaluated on demand."""
        return contact_uxx_component(self.generator, p)


def contact_uxx_component(omega: SmoothField, p: JetPoint):
    q, ux = p.uxx, p.ux
    return (
        omega.d(p, "x", "x")
        + 2 * ux * omega.d(p, "x", "u")
        + 2 * q * omega.d(p, "x", "ux")
        + ux * ux * omega.d(p, "u", "u")
        + 2 * ux * q * omega.d(p, "u", "ux")
        + q * q * omega.d(p, "ux", "ux")
        + q * omega.d(p, "u")
    )


def contact_vector_from_generator(omega: SmoothField) -> ContactVector:
    if not omega.arity <= _FIRST_ORDER:
        raise CapabilityError(f"generator {omega.name} must depend on (t, x, u, u_x) only")
    first = [c for c in ("x", "u", "ux")]
    for a, b in combinations_with_replacement(first, 2):
        if not omega.has_partial(a, b):
            raise CapabilityError(f"generator {omega.name} lacks second partial ({a}, {b})")
    arity = omega.arity | {"ux"}
    y_x = fd_partials(lambda p: -omega.d(p, "ux"), arity, name=f"Y_x[{omega.name}]")
    y_u = fd_partials(lambda p: omega(p) - p.ux * omega.d(p, "ux"), arity, name=f"Y_u[{omega.name}]")
    y_ux = fd_partials(lambda p: omega.d(p, "x") + p.ux * omega.d(p, "u"), arity, name=f"Y_ux[{omega.name}]")
    return ContactVector(y_x, y_u, y_ux, omega)


def lie_point_generator(f: SmoothField, g: SmoothField) -> SmoothField:
    """Generator ``g(t, x, u) - f(t, x) u_x`` of a projected point transformation."""
    if not f.arity <= {"t", "x"}:
        raise DomainError(f"f must depend on (t, x) only, got {sorted(f.arity)}")
    if not g.arity <= {"t", "x", "u"}:
        raise DomainError(f"g must depend on (t, x, u) only, got {sorted(g.arity)}")
    return g - f * coordinate("ux")
