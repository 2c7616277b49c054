"""Second-order parabolic operators, diffusivity laws and morphism data.

An operator acts as

    L u = b2^{ij} u_ij + c2^{ij} u_i u_j + b1^i u_i + q

with coefficients that may depend on the chart coordinates, ``t`` and ``u``.
Coefficients are either :class:`~parafactor.expr.Expr` trees or
:class:`NumericCoefficient` callables (used where a symbolic form would be
too large, e.g. the 4-D Laplace-Beltrami operator).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Mapping, Sequence, Union

import numpy as np

from .expr import (ONE, ZERO, Const, DomainError, Expr, Var, as_expr, diff, evaluate,
                   free_variables, func, substitute)

if TYPE_CHECKING:
    from .geometry import Chart, MetricField

__all__ = [
    "NumericCoefficient", "Coefficient", "ParabolicOperator", "OperatorCoefficients",
    "apply", "apply_jets", "heat_operator", "canonical_operator_D",
    "CanonicalMorphismSpec", "DiffusivityClass", "classify_diffusivity",
    "ClassificationError", "Morphism", "MorphismError", "lift_solution",
    "invariance_check", "InvarianceReport", "test_functions", "pe_prime_defect",
    "coefficient_variables", "evaluate_coefficient", "cmul", "cadd",
]


class NumericCoefficient:
    """A coefficient given by a callable ``fn(bindings) -> array``.

    ``variables`` lists the names the callable reads, so that the operator can
    tell whether it depends on ``t`` or ``u``.
    """

    def __init__(self, fn: Callable[[Mapping[str, object]], object], variables=frozenset()):
        self.fn = fn
        self.variables = frozenset(variables)

    def __call__(self, bindings):
        return self.fn(bindings)

    def __repr__(self):
        return f"NumericCoefficient(variables={sorted(self.variables)})"


Coefficient = Union[Expr, NumericCoefficient]


def coefficient_variables(c: Coefficient) -> frozenset:
    if isinstance(c, Expr):
        return free_variables(c)
    return c.variables


def evaluate_coefficient(c: Coefficient, bindings, shape=None) -> np.ndarray:
    value = evaluate(c, bindings) if isinstance(c, Expr) else c(bindings)
    if shape is None:
        return np.asarray(value, dtype=float)
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


def _combine(op, *cs: Coefficient) -> Coefficient:
    if all(isinstance(c, Expr) for c in cs):
        return op(*cs)
    variables = frozenset().union(*(coefficient_variables(c) for c in cs))
    return NumericCoefficient(lambda b: op(*(evaluate_coefficient(c, b) for c in cs)), variables)


def cmul(a: Coefficient, b: Coefficient) -> Coefficient:
    if isinstance(a, Const) and a.value == 0 or isinstance(b, Const) and b.value == 0:
        return ZERO
    return _combine(lambda x, y: x * y, a, b)


def cadd(a: Coefficient, b: Coefficient) -> Coefficient:
    if isinstance(a, Const) and a.value == 0:
        return b
    if isinstance(b, Const) and b.value == 0:
        return a
    return _combine(lambda x, y: x + y, a, b)


@dataclass(frozen=True)
class OperatorCoefficients:
    b2: np.ndarray  # batch + (n, n)
    c2: np.ndarray
    b1: np.ndarray  # batch + (n,)
    q: np.ndarray   # batch


@dataclass(frozen=True)
class ParabolicOperator:
    chart: "Chart"
    b2: tuple
    c2: tuple
    b1: tuple
    q: Coefficient = ZERO
    pe_prime: bool = False

    def __post_init__(self):
        n = self.chart.dim

        def conv(c):
            return c if isinstance(c, NumericCoefficient) else as_expr(c)

        b2 = tuple(tuple(conv(c) for c in row) for row in self.b2)
        c2 = tuple(tuple(conv(c) for c in row) for row in self.c2)
        b1 = tuple(conv(c) for c in self.b1)
        if len(b2) != n or any(len(r) != n for r in b2) or len(c2) != n \
                or any(len(r) != n for r in c2) or len(b1) != n:
            raise ValueError(f"coefficient shapes do not match chart dimension {n}")
        object.__setattr__(self, "b2", b2)
        object.__setattr__(self, "c2", c2)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "q", conv(self.q))

    @classmethod
    def zero(cls, chart: "Chart") -> "ParabolicOperator":
        n = chart.dim
        z = tuple(tuple(ZERO for _ in range(n)) for _ in range(n))
        return cls(chart, z, z, tuple(ZERO for _ in range(n)), ZERO)

    @property
    def dim(self) -> int:
        return self.chart.dim

    def all_coefficients(self):
        yield from (c for row in self.b2 for c in row)
        yield from (c for row in self.c2 for c in row)
        yield from self.b1
        yield self.q

    def depends_on(self, name: str, include_q: bool = True) -> bool:
        coeffs = list(self.all_coefficients())
        if not include_q:
            coeffs = coeffs[:-1]
        return any(name in coefficient_variables(c) for c in coeffs)

    @property
    def autonomous(self) -> bool:
        return not self.depends_on("t")

    def coefficients(self, bindings: Mapping[str, object]) -> OperatorCoefficients:
        n = self.dim
        shape = np.broadcast_shapes(*(np.shape(bindings[c]) for c in self.chart.coords))
        b2 = np.empty(shape + (n, n))
        c2 = np.empty(shape + (n, n))
        b1 = np.empty(shape + (n,))
        for i in range(n):
            b1[..., i] = evaluate_coefficient(self.b1[i], bindings, shape)
            for j in range(n):
                b2[..., i, j] = evaluate_coefficient(self.b2[i][j], bindings, shape)
                c2[..., i, j] = evaluate_coefficient(self.c2[i][j], bindings, shape)
        q = evaluate_coefficient(self.q, bindings, shape)
        return OperatorCoefficients(b2, c2, b1, np.array(q))

    def validate(self, points: np.ndarray, u_values=(0.0,), t: float = 0.0) -> None:
        """Check symmetry and ellipticity of b2 and symmetry of c2 at sample points."""
        for u in u_values:
            co = self.coefficients(self.chart.bindings(points, u=u, t=t))
            if np.max(np.abs(co.b2 - np.swapaxes(co.b2, -1, -2)), initial=0) > 1e-10:
                raise ValueError("second-order coefficients are not symmetric")
            if np.max(np.abs(co.c2 - np.swapaxes(co.c2, -1, -2)), initial=0) > 1e-10:
                raise ValueError("gradient-squared coefficients are not symmetric")
            if np.any(np.linalg.eigvalsh(co.b2) <= 0):
                raise ValueError("second-order coefficients are not positive-definite")


def apply_jets(co: OperatorCoefficients, grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    """Combine coefficients with first/second derivatives (batch-shaped arrays)."""
    return (np.einsum("...ij,...ij->...", co.b2, hess)
            + np.einsum("...ij,...i,...j->...", co.c2, grad, grad)
            + np.einsum("...i,...i->...", co.b1, grad)
            + co.q)


def _point_bindings(chart, point, extra) -> dict:
    if isinstance(point, Mapping):
        b = dict(point)
        b.update(extra)
        return b
    return chart.bindings(np.asarray(point, dtype=float), **extra)


def apply(L: ParabolicOperator, f, point=None, u_value=None, t: float = 0.0):
    """Evaluate ``(L f)`` at ``point``.

    ``f`` is an expression in the chart coordinates (derivatives are exact) or
    a :class:`~parafactor.solver.GridField` snapshot (central differences; the
    point must be an interior grid node).  ``point`` is a coordinate tuple, an
    ``(N, n)`` array or a bindings mapping.  Coefficients depending on ``u``
    are evaluated at ``u_value`` when given, otherwise at ``f(point)``.
    """
    from .solver import GridField, apply_grid_at

    if isinstance(f, GridField):
        return apply_grid_at(L, f, point, u_value=u_value, t=t)
    f = as_expr(f)
    coords = L.chart.coords
    b = _point_bindings(L.chart, point, {"t": t})
    shape = np.broadcast_shapes(*(np.shape(b[c]) for c in coords))
    value = np.broadcast_to(np.asarray(evaluate(f, b), dtype=float), shape)
    b["u"] = value if u_value is None else np.broadcast_to(np.asarray(u_value, dtype=float), shape)
    n = len(coords)
    grad = np.empty(shape + (n,))
    hess = np.empty(shape + (n, n))
    first = [diff(f, x) for x in coords]
    for i in range(n):
        grad[..., i] = np.broadcast_to(evaluate(first[i], b), shape)
        for j in range(i, n):
            hess[..., i, j] = hess[..., j, i] = np.broadcast_to(evaluate(diff(first[i], coords[j]), b), shape)
    out = apply_jets(L.coefficients(b), grad, hess)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# heat operators and the canonical operators D
# ---------------------------------------------------------------------------

def heat_operator(g: "MetricField", a="1", q="0") -> ParabolicOperator:
    """``a(u) * Laplace-Beltrami + q(u)``."""
    from .geometry import laplace_beltrami

    a, q = as_expr(a), as_expr(q)
    lb = laplace_beltrami(g)
    n = g.dim
    b2 = tuple(tuple(cmul(a, lb.b2[i][j]) for j in range(n)) for i in range(n))
    b1 = tuple(cmul(a, lb.b1[j]) for j in range(n))
    return ParabolicOperator(g.chart, b2, lb.c2, b1, q, pe_prime=True)


@dataclass(frozen=True)
class CanonicalMorphismSpec:
    """Data of a canonical morphism: which diffusivity case, the weight beta, constants."""

    case: str  # generic | power | exponential
    beta: Expr = ONE
    lam: float = 1.0
    q0: float = 0.0
    q1: float = 0.0
    a0: float = 1.0

    def __post_init__(self):
        if self.case not in ("generic", "power", "exponential"):
            raise ValueError(f"unknown canonical case {self.case!r}")
        object.__setattr__(self, "beta", as_expr(self.beta))
        if self.case != "generic" and self.lam == 0:
            raise ValueError("lambda must be nonzero for power and exponential cases")

    def u_map(self) -> Expr:
        u = Var("u")
        if self.case == "power":
            return u / self.beta
        if self.case == "exponential":
            return u - self.beta
        return u

    def u_inverse(self) -> Expr:
        v = Var("v")
        if self.case == "power":
            return self.beta * v
        if self.case == "exponential":
            return v + self.beta
        return v

    def reduced_source(self) -> Expr:
        """Q(v) of the reduced equation."""
        if self.case == "power":
            return Const(self.q1) * Var("v")
        if self.case == "exponential":
            return Const(self.q1)
        return ZERO

    def morphism(self, source: Sequence[str], x_map: Mapping[str, object]) -> "Morphism":
        return Morphism(tuple(source), {k: as_expr(v) for k, v in x_map.items()},
                        self.u_map(), u_inverse=self.u_inverse())


def canonical_operator_D(spec: CanonicalMorphismSpec, g: "MetricField") -> ParabolicOperator:
    """Expand the canonical operator D into coefficient form.

    power:        D f = beta^(lam-1) (Lap(beta f) + q0 beta f)
    exponential:  D f = exp(lam beta) (Lap f + Lap beta + q0)
    generic:      D = Lap
    The zeroth-order part of the power case is linear in f and is stored in
    the ``q`` slot as a multiple of ``u``.
    """
    from .geometry import laplace_beltrami

    lb = laplace_beltrami(g)
    if spec.case == "generic":
        return lb
    if spec.lam == 0:
        raise ValueError("lambda must be nonzero")
    n = g.dim
    coords = g.chart.coords
    beta = spec.beta
    dbeta = [diff(beta, x) for x in coords]
    lap_beta: Coefficient = ZERO
    for i in range(n):
        lap_beta = cadd(lap_beta, cmul(lb.b1[i], dbeta[i]))
        for j in range(n):
            lap_beta = cadd(lap_beta, cmul(lb.b2[i][j], diff(dbeta[i], coords[j])))
    lam = Const(float(spec.lam))
    if spec.case == "power":
        w = beta ** lam
        w1 = beta ** Const(float(spec.lam) - 1.0)
        b2 = tuple(tuple(cmul(w, lb.b2[i][j]) for j in range(n)) for i in range(n))
        b1 = []
        for j in range(n):
            cross: Coefficient = ZERO
            for i in range(n):
                cross = cadd(cross, cmul(lb.b2[i][j], dbeta[i]))
            b1.append(cadd(cmul(w, lb.b1[j]), cmul(Const(2.0) * w1, cross)))
        q = cmul(cmul(w1, cadd(lap_beta, Const(float(spec.q0)) * beta)), Var("u"))
        return ParabolicOperator(g.chart, b2, lb.c2, tuple(b1), q)
    w = func("exp", lam * beta)
    b2 = tuple(tuple(cmul(w, lb.b2[i][j]) for j in range(n)) for i in range(n))
    b1 = tuple(cmul(w, lb.b1[j]) for j in range(n))
    q = cmul(w, cadd(lap_beta, Const(float(spec.q0))))
    return ParabolicOperator(g.chart, b2, lb.c2, b1, q)


# ---------------------------------------------------------------------------
# diffusivity classification
# ---------------------------------------------------------------------------

class ClassificationError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusivityClass:
    tag: str  # arbitrary | power | exponential | constant
    a0: float | None = None
    u0: float | None = None
    lam: float | None = None
    residual: float = 0.0

    def __str__(self):
        if self.tag == "constant":
            return f"constant(a0={self.a0:.10g})"
        if self.tag == "power":
            return f"power(a0={self.a0:.10g}, u0={self.u0:.10g}, lambda={self.lam:.10g})"
        if self.tag == "exponential":
            return f"exponential(a0={self.a0:.10g}, lambda={self.lam:.10g})"
        return "arbitrary"


def classify_diffusivity(a, u_range=(0.5, 2.0), samples: int = 64, tol: float = 1e-8) -> DiffusivityClass:
    """Place ``a(u)`` in the lattice constant < power, exponential < arbitrary.

    The logarithmic derivative a'/a is sampled on ``u_range``: it vanishes for a
    constant law, is constant for an exponential law and equals
    lam / (u - u0) for a power law.  The most specific class whose fit
    residual (relative to 1 + max|a'/a|) is below ``tol`` wins.
    """
    a = as_expr(a)
    extra = free_variables(a) - {"u"}
    if extra:
        raise ClassificationError(f"diffusivity depends on {sorted(extra)}, expected u only")
    lo, hi = map(float, u_range)
    u = np.linspace(lo, hi, samples)
    av = np.broadcast_to(np.asarray(evaluate(a, {"u": u}), dtype=float), u.shape)
    if np.any(av <= 0) or not np.all(np.isfinite(av)):
        raise ClassificationError("diffusivity must be positive on the sampled range")
    d = np.broadcast_to(np.asarray(evaluate(diff(a, "u"), {"u": u}), dtype=float), u.shape) / av
    scale = 1.0 + np.max(np.abs(d))

    if np.max(np.abs(d)) / scale < tol:
        return DiffusivityClass("constant", a0=float(np.mean(av)), residual=float(np.max(np.abs(d))))

    lam_e = float(np.mean(d))
    res_e = float(np.max(np.abs(d - lam_e)) / scale)

    res_p, lam_p, u0_p = math.inf, None, None
    if np.all(np.abs(d) > 1e-12):
        slope, intercept = np.polyfit(u, 1.0 / d, 1)
        if abs(slope) > 1e-10:
            lam_p = 1.0 / slope
            u0_p = -intercept * lam_p
            base = u - u0_p
            if np.all(np.abs(base) > 1e-12):
                res_p = float(np.max(np.abs(d - lam_p / base)) / scale)

    fits_e, fits_p = res_e < tol, res_p < tol
    if fits_e and fits_p:
        raise ClassificationError("both power and exponential laws fit; ambiguous")
    if fits_e:
        a0 = float(np.mean(av * np.exp(-lam_e * u)))
        return DiffusivityClass("exponential", a0=a0, lam=lam_e, residual=res_e)
    if fits_p:
        base = u - u0_p
        k = round(lam_p)
        if np.all(base < 0) and abs(lam_p - k) < 1e-9:
            denom = base ** k
        else:
            denom = np.abs(base) ** lam_p
        return DiffusivityClass("power", a0=float(np.mean(av / denom)), u0=float(u0_p),
                                lam=float(lam_p), residual=res_p)
    return DiffusivityClass("arbitrary", residual=min(res_e, res_p))


# ---------------------------------------------------------------------------
# morphisms and solution lifting
# ---------------------------------------------------------------------------

class MorphismError(ValueError):
    pass


@dataclass(frozen=True)
class Morphism:
    """A map (t, x, u) -> (t'(t), x'(t, x), u'(t, x, u)).

    ``x_map`` maps target coordinate names to expressions in the source
    coordinates (and possibly ``t``).  ``u_inverse``, when known, expresses u
    in terms of the reduced value ``v`` and (t, x).
    """

    source: tuple[str, ...]
    x_map: Mapping[str, Expr]
    u_map: Expr = field(default_factory=lambda: Var("u"))
    t_map: Expr = field(default_factory=lambda: Var("t"))
    u_inverse: Expr | None = None

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(self.source))
        object.__setattr__(self, "x_map", {k: as_expr(v) for k, v in dict(self.x_map).items()})
        object.__setattr__(self, "u_map", as_expr(self.u_map))
        object.__setattr__(self, "t_map", as_expr(self.t_map))
        if self.u_inverse is not None:
            object.__setattr__(self, "u_inverse", as_expr(self.u_inverse))
        src = set(self.source)
        if not free_variables(self.t_map) <= {"t"}:
            raise MorphismError("time map may depend on t only")
        for name, comp in self.x_map.items():
            extra = free_variables(comp) - src - {"t"}
            if extra:
                raise MorphismError(f"x-map component {name} depends on {sorted(extra)}")
        extra = free_variables(self.u_map) - src - {"t", "u"}
        if extra:
            raise MorphismError(f"u-map depends on {sorted(extra)}")

    @classmethod
    def identity(cls, coords: Sequence[str]) -> "Morphism":
        return cls(tuple(coords), {c: Var(c) for c in coords}, u_inverse=Var("v"))

    @property
    def autonomous(self) -> bool:
        return (self.t_map == Var("t")
                and all("t" not in free_variables(c) for c in self.x_map.values())
                and "t" not in free_variables(self.u_map))

    def check_monotone(self, bindings: Mapping[str, object], u_values: np.ndarray) -> int:
        """Return the sign of du'/du, raising if it vanishes or changes sign."""
        du = diff(self.u_map, "u")
        signs = set()
        for u in np.atleast_1d(u_values):
            vals = np.asarray(evaluate(du, dict(bindings, u=u), strict=False), dtype=float)
            if np.any(~np.isfinite(vals)) or np.any(vals == 0):
                raise MorphismError("u-map is not strictly monotone in u on the sampled range")
            signs.update(np.unique(np.sign(vals)).tolist())
        if len(signs) != 1:
            raise MorphismError("u-map changes monotonicity direction")
        return int(signs.pop())

    def invert_u(self, bindings: Mapping[str, object], v: np.ndarray,
                 bracket: float = 1.0, iterations: int = 200) -> np.ndarray:
        """Solve u'(t, x, u) = v for u."""
        v = np.asarray(v, dtype=float)
        if self.u_inverse is not None:
            out = evaluate(self.u_inverse, dict(bindings, v=v))
            return np.broadcast_to(np.asarray(out, dtype=float), v.shape).copy()
        b = {k: np.broadcast_to(np.asarray(val, dtype=float), v.shape) for k, val in bindings.items()}

        def g(u):
            return np.asarray(evaluate(self.u_map, dict(b, u=u), strict=False), dtype=float) - v

        lo = v - bracket
        hi = v + bracket
        sign = self.check_monotone(b, np.array([v.min() - bracket, v.max() + bracket]))
        for _ in range(60):
            glo, ghi = sign * g(lo), sign * g(hi)
            need_lo, need_hi = glo > 0, ghi < 0
            if not (need_lo.any() or need_hi.any()):
                break
            width = hi - lo
            lo = np.where(need_lo, lo - width, lo)
            hi = np.where(need_hi, hi + width, hi)
        else:
            raise MorphismError("could not bracket the inverse of the u-map")
        self.check_monotone(b, np.array([lo.min(), hi.max()]))
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            gm = sign * g(mid)
            lo = np.where(gm <= 0, mid, lo)
            hi = np.where(gm > 0, mid, hi)
            if np.max(hi - lo) < 1e-14 * (1 + np.max(np.abs(mid))):
                break
        return 0.5 * (lo + hi)


def lift_solution(m: Morphism, v, x_grid, y_grid=None):
    """Pull a reduced solution series back along ``m``.

    ``v`` is a :class:`~parafactor.solver.GridField` series on the target
    chart; the result is the series u(t, x) = u'^{-1}(x, v(t'(t), x'(t, x)))
    sampled on ``x_grid``.
    """
    from .solver import GridField

    if not isinstance(v, GridField):
        raise TypeError("lift_solution expects a GridField series")
    target = v.grid.chart.coords
    missing = set(target) - set(m.x_map)
    if missing:
        raise MorphismError(f"morphism gives no formula for target coordinates {sorted(missing)}")
    if tuple(x_grid.chart.coords) != tuple(m.source):
        raise MorphismError("lift grid chart does not match morphism source coordinates")
    nodes = x_grid.bindings()
    times_v = np.asarray(v.times)
    # times on X solving t'(t) = t_v
    if m.t_map == Var("t"):
        times_x = times_v.copy()
    else:
        times_x = np.array([_invert_scalar(m.t_map, tv) for tv in times_v])
    values = []
    for k, (tx, tv) in enumerate(zip(times_x, times_v)):
        b = dict(nodes, t=tx)
        images = np.stack([np.broadcast_to(np.asarray(evaluate(m.x_map[c], b), dtype=float), x_grid.shape)
                           for c in target], axis=-1)
        vv = v.interpolate(images, index=k)
        values.append(m.invert_u(b, vv))
    return GridField(x_grid, tuple(float(t) for t in times_x), np.stack(values))


def _invert_scalar(e: Expr, target: float) -> float:
    from scipy.optimize import brentq

    def f(t):
        return evaluate(e, {"t": t}) - target

    lo, hi = target - 1.0, target + 1.0
    for _ in range(60):
        if f(lo) * f(hi) <= 0:
            return brentq(f, lo, hi, xtol=1e-14)
        lo, hi = lo - (hi - lo), hi + (hi - lo)
    raise MorphismError("time map could not be inverted")


# ---------------------------------------------------------------------------
# invariance of an operator under a point transformation
# ---------------------------------------------------------------------------

def test_functions(coords: Sequence[str], count: int = 12) -> list[Expr]:
    """A fixed family of smooth test functions in the given coordinates."""
    from .expr import parse

    n = len(coords)
    c = list(coords)
    c2 = c[1 % n]
    c3 = c[2 % n]
    # two members depend on every coordinate so that all mixed second
    # derivatives are exercised
    lin1 = " + ".join(f"{0.3 + 0.2 * k:g}*{x}" for k, x in enumerate(c))
    lin2 = " + ".join(f"{(-1) ** k * (0.35 - 0.05 * k):g}*{x}" for k, x in enumerate(c))
    templates = [
        "{a}", "{b}", "{a}^2", "{a}*{b}", "{b}^2 - {c}", "sin({l1})",
        "cos(0.7*{a} - {c})", "exp({l2})", "{a}^3 - 2*{a}*{b}^2",
        "sin({b})*cos({a})", "1/(2 + {a}^2 + {c}^2)", "{a}*exp(-0.1*{b}^2) + {c}",
    ]
    out = [parse(t.format(a=c[0], b=c2, c=c3, l1=lin1, l2=lin2)) for t in templates]
    k = 0
    while len(out) < count:
        out.append(parse(f"sin({k + 1}*{c[k % n]}) * {c[(k + 1) % n]}"))
        k += 1
    return out[:count]


@dataclass
class InvarianceReport:
    passed: bool
    witness: float
    threshold: float
    location: tuple | None
    excluded: list = field(default_factory=list)
    evaluated: int = 0

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"invariance {verdict}: witness {self.witness:.3e} (threshold {self.threshold:.1e}), "
                f"{self.evaluated} points, {len(self.excluded)} excluded")


def invariance_check(L: ParabolicOperator, T: Sequence, points=None, seed: int = 42,
                     count: int = 200, threshold: float = 1e-6, functions=None) -> InvarianceReport:
    """Compare (L f)(T x) with L(f o T)(x) over test functions and sample points.

    The witness is the largest discrepancy scaled by 1 + max(|lhs|, |rhs|).
    Sample points where T (or the operator) is undefined are excluded and
    recorded.
    """
    chart = L.chart
    T = [as_expr(c) for c in T]
    if len(T) != chart.dim:
        raise ValueError("transformation must have one component per coordinate")
    if points is None:
        points = chart.sample(count, seed=seed)
    points = np.asarray(points, dtype=float)
    b = chart.bindings(points)
    images = np.stack([np.broadcast_to(np.asarray(evaluate(c, b, strict=False), dtype=float), points.shape[:1])
                       for c in T], axis=-1)
    ok = np.all(np.isfinite(images), axis=-1)
    excluded = [tuple(p) for p in points[~ok]]
    pts, imgs = points[ok], images[ok]
    functions = functions if functions is not None else test_functions(chart.coords)
    mapping = dict(zip(chart.coords, T))
    worst = np.zeros(len(pts))
    valid = np.ones(len(pts), dtype=bool)
    for f in functions:
        fT = substitute(f, mapping)
        with np.errstate(all="ignore"):
            u_img = np.asarray(evaluate(f, chart.bindings(imgs), strict=False), dtype=float)
            lhs = apply(L, f, imgs, u_value=u_img)
            rhs = apply(L, fT, pts, u_value=u_img)
            err = np.abs(lhs - rhs) / (1.0 + np.maximum(np.abs(lhs), np.abs(rhs)))
        good = np.isfinite(err)
        valid &= good
        worst = np.maximum(worst, np.where(good, err, 0.0))
    excluded += [tuple(p) for p in pts[~valid]]
    worst = np.where(valid, worst, 0.0)
    if not valid.any():
        raise DomainError("transformation undefined at every sample point")
    k = int(np.argmax(worst))
    witness = float(worst[k])
    return InvarianceReport(witness < threshold, witness, threshold, tuple(pts[k]), excluded, int(valid.sum()))


def pe_prime_defect(L: ParabolicOperator, bindings: Mapping[str, object], u_values=(0.0,)) -> float:
    """How far L is from the structured form b(t,x)(a(t,x,u) u_ij + c(t,x,u) u_i u_j) + ...

    Returns the largest relative deviation of c2 from a pointwise multiple of
    b2 and of b2(u) from a multiple of b2(u_0).
    """
    worst = 0.0
    ref = None
    for u in u_values:
        co = L.coefficients(dict(bindings, u=u))
        bb = np.einsum("...ij,...ij->...", co.b2, co.b2)
        kappa = np.einsum("...ij,...ij->...", co.c2, co.b2) / bb
        dev = np.linalg.norm(co.c2 - kappa[..., None, None] * co.b2, axis=(-1, -2))
        worst = max(worst, float(np.max(dev / (1 + np.linalg.norm(co.c2, axis=(-1, -2))))))
        if ref is None:
            ref = co.b2
        else:
            s = np.einsum("...ij,...ij->...", co.b2, ref) / np.einsum("...ij,...ij->...", ref, ref)
            dev = np.linalg.norm(co.b2 - s[..., None, None] * ref, axis=(-1, -2))
            worst = max(worst, float(np.max(dev / (1 + np.linalg.norm(co.b2, axis=(-1, -2))))))
    return worst
