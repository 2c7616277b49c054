"""Connection forms of one-parameter isometry fiberings and the group-lifting test.

Given an isometry generator eta on X and a section Phi(y, s) of the orbit
fibering over a base Y' (Phi follows the flow of eta in s), the connection
form is chi = g(eta, .) / g(eta, eta).  In the coordinates (y, s) it splits
as chi = p^*chi' + dh; a discrete group acting on Y' lifts to isometries of X
exactly when g^*chi' - chi' is exact (line fibers) or closed with periods in
H*Z (circle fibers of vertical period H).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate

from .expr import ZERO, Expr, Var, as_expr, diff, evaluate, substitute
from .geometry import Chart, MetricField, VectorField, inner
from .projectibility import SmoothMap

__all__ = [
    "GroupFibering", "OneForm", "Loop", "ConnectionError", "DecompositionError",
    "connection_form", "killing_defect", "curvature", "Curvature", "decompose",
    "Decomposition", "lift_check", "LiftVerdict", "pullback", "exterior_derivative_numeric",
    "ddchi_defect", "curvature_invariance_defect",
]

AVERAGE_NODES = 64
CLOSED_TOL = 1e-6
PERIOD_TOL = 1e-6
DECOMPOSE_TOL = 1e-6


class ConnectionError(ValueError):
    pass


class DecompositionError(ConnectionError):
    pass


@dataclass(frozen=True)
class OneForm:
    """Covariant components on a chart: expressions or callables of bindings."""

    chart: Chart
    components: tuple

    def __post_init__(self):
        comps = tuple(c if callable(c) and not isinstance(c, Expr) else as_expr(c) for c in self.components)
        if len(comps) != self.chart.dim:
            raise ValueError("one component per coordinate required")
        object.__setattr__(self, "components", comps)

    @property
    def symbolic(self) -> bool:
        return all(isinstance(c, Expr) for c in self.components)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        b = self.chart.bindings(points)
        out = []
        for c in self.components:
            v = evaluate(c, b) if isinstance(c, Expr) else c(b)
            out.append(np.broadcast_to(np.asarray(v, dtype=float), points.shape[:-1]))
        return np.stack(out, axis=-1)

    def __add__(self, other: "OneForm") -> "OneForm":
        if not (self.symbolic and other.symbolic):
            raise TypeError("only symbolic one-forms can be added")
        return OneForm(self.chart, tuple(a + b for a, b in zip(self.components, other.components)))


@dataclass(frozen=True)
class Loop:
    """A closed curve t -> gamma(t), t in [0, 1], in a chart."""

    name: str
    chart: Chart
    components: tuple[Expr, ...]
    parameter: str = "t"

    def __post_init__(self):
        comps = tuple(as_expr(c) for c in self.components)
        if len(comps) != self.chart.dim:
            raise ValueError("one loop component per coordinate required")
        object.__setattr__(self, "components", comps)
        start, end = self.at(np.array([0.0])), self.at(np.array([1.0]))
        gap = start - end
        for k, iv in enumerate(self.chart.intervals):
            if iv.periodic:
                gap[..., k] -= iv.length * np.round(gap[..., k] / iv.length)
        if np.max(np.abs(gap)) > 1e-10:
            raise ValueError(f"loop {self.name} is not closed (gap {np.max(np.abs(gap)):.3g})")

    def at(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack([np.broadcast_to(np.asarray(evaluate(c, {self.parameter: t}), float), t.shape)
                         for c in self.components], axis=-1)

    def velocity(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.stack([np.broadcast_to(np.asarray(evaluate(diff(c, self.parameter), {self.parameter: t}),
                                                    float), t.shape)
                         for c in self.components], axis=-1)


@dataclass(frozen=True)
class GroupFibering:
    """Orbit fibering of a one-parameter isometry group.

    ``section`` gives Phi(y, s) in source coordinates as expressions in the
    base coordinates and ``fiber_param``; s -> Phi(y, s) must be an integral
    curve of ``eta``.  ``fiber_range`` is one period for circle fibers and the
    truncation interval used for averaging on line fibers.
    """

    metric: MetricField
    eta: VectorField
    base: Chart
    projection: SmoothMap
    section: tuple[Expr, ...]
    topology: str = "line"
    fiber_range: tuple[float, float] = (-1.0, 1.0)
    fiber_param: str = "s"

    def __post_init__(self):
        if self.topology not in ("line", "circle"):
            raise ValueError("fiber topology must be 'line' or 'circle'")
        sec = tuple(as_expr(c) for c in self.section)
        if len(sec) != self.metric.dim:
            raise ValueError("section needs one expression per source coordinate")
        object.__setattr__(self, "section", sec)
        if self.eta.chart != self.metric.chart:
            raise ValueError("generator and metric live on different charts")
        if self.projection.source != self.metric.chart or self.projection.target != self.base:
            raise ValueError("projection must map the metric chart onto the base chart")

    @property
    def chart(self) -> Chart:
        return self.metric.chart

    def fiber_nodes(self) -> tuple[np.ndarray, np.ndarray]:
        """Quadrature nodes and weights along one fiber (weights sum to 1)."""
        lo, hi = self.fiber_range
        if self.topology == "circle":
            s = lo + (hi - lo) * np.arange(AVERAGE_NODES) / AVERAGE_NODES
            return s, np.full(AVERAGE_NODES, 1.0 / AVERAGE_NODES)
        x, w = np.polynomial.legendre.leggauss(AVERAGE_NODES)
        return lo + (hi - lo) * (x + 1) / 2, w / 2

    def section_bindings(self, y: np.ndarray, s: np.ndarray) -> dict:
        b = self.base.bindings(y)
        b[self.fiber_param] = s
        return b

    def lift(self, y: np.ndarray, s) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        s = np.broadcast_to(np.asarray(s, dtype=float), y.shape[:-1])
        b = self.section_bindings(y, s)
        return np.stack([np.broadcast_to(np.asarray(evaluate(c, b), float), y.shape[:-1])
                         for c in self.section], axis=-1)

    def check(self, count: int = 100, seed: int = 42, tol: float = 1e-9) -> dict:
        """Validate nonvanishing eta, the Killing property and the section."""
        pts = self.chart.sample(count, seed=seed)
        theta = np.asarray(evaluate(inner(self.metric, self.eta, self.eta), self.chart.bindings(pts)), float)
        if np.any(theta <= 0):
            raise ConnectionError("generator vanishes at a sample point")
        killing = killing_defect(self.metric, self.eta, pts)
        if killing > 1e-6:
            raise ConnectionError(f"generator is not a Killing field (defect {killing:.3g})")
        y = self.base.sample(count, seed=seed)
        lo, hi = self.fiber_range
        s = lo + (hi - lo) * np.linspace(0.05, 0.95, count)
        b = self.section_bindings(y, s)
        x = self.lift(y, s)
        xb = self.chart.bindings(x)
        flow_gap = 0.0
        for comp, eta_c in zip(self.section, self.eta.components):
            lhs = np.asarray(evaluate(diff(comp, self.fiber_param), b), float)
            rhs = np.asarray(evaluate(eta_c, xb), float)
            flow_gap = max(flow_gap, float(np.max(np.abs(lhs - rhs))))
        if flow_gap > tol:
            raise ConnectionError(f"section is not an integral curve of the generator (gap {flow_gap:.3g})")
        back = self.projection.raw(x) - y
        for k, iv in enumerate(self.base.intervals):
            if iv.periodic:
                back[..., k] -= iv.length * np.round(back[..., k] / iv.length)
        sec_gap = float(np.max(np.abs(back)))
        if sec_gap > tol:
            raise ConnectionError(f"section does not project back to the base (gap {sec_gap:.3g})")
        return {"killing_defect": killing, "flow_gap": flow_gap, "section_gap": sec_gap,
                "min_theta": float(np.min(theta))}


def killing_defect(g: MetricField, eta: VectorField, points: np.ndarray) -> float:
    """Largest component of the Lie derivative of g along eta at sample points.

    (L_eta g)_ij = eta^k d_k g_ij + g_kj d_i eta^k + g_ik d_j eta^k, with exact
    derivatives.
    """
    coords = g.chart.coords
    n = g.dim
    b = g.chart.bindings(points)
    worst = 0.0
    for i in range(n):
        for j in range(i, n):
            e: Expr = ZERO
            for k in range(n):
                e = e + eta.components[k] * diff(g.g[i][j], coords[k])
                e = e + g.g[k][j] * diff(eta.components[k], coords[i])
                e = e + g.g[i][k] * diff(eta.components[k], coords[j])
            val = np.asarray(evaluate(e, b), float)
            worst = max(worst, float(np.max(np.abs(val))))
    return worst


def connection_form(gf: GroupFibering, points: np.ndarray | None = None) -> OneForm:
    """chi = g(eta, .) / g(eta, eta); checks chi(eta) = 1 at sample points."""
    g, eta = gf.metric, gf.eta
    n = g.dim
    theta = inner(g, eta, eta)
    comps = []
    for i in range(n):
        e: Expr = ZERO
        for j in range(n):
            e = e + g.g[i][j] * eta.components[j]
        comps.append(e / theta)
    chi = OneForm(gf.chart, tuple(comps))
    pts = gf.chart.sample(100, seed=7) if points is None else points
    b = gf.chart.bindings(pts)
    th = np.asarray(evaluate(theta, b), float)
    if np.any(th <= 0):
        raise ConnectionError("generator has zero length at a sample point")
    vals = chi.evaluate(pts)
    etav = np.stack([np.broadcast_to(np.asarray(evaluate(c, b), float), pts.shape[:1]) for c in eta.components],
                    axis=-1)
    norm = np.sum(vals * etav, axis=-1)
    if np.max(np.abs(norm - 1)) > 1e-10:
        raise ConnectionError("connection form is not normalized on the generator")
    return chi


def pullback(form: OneForm, section: Sequence[Expr], params: Sequence[str]) -> list[Expr]:
    """Components of Phi^*form in the parameters, for a symbolic form."""
    if not form.symbolic:
        raise TypeError("pullback needs a symbolic one-form")
    mapping = dict(zip(form.chart.coords, section))
    comps = [substitute(c, mapping) for c in form.components]
    out = []
    for p in params:
        e: Expr = ZERO
        for c, x in zip(comps, section):
            e = e + c * diff(x, p)
        out.append(e)
    return out


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------

def _two_form_symbolic(form: OneForm) -> list[list[Expr]]:
    coords = form.chart.coords
    n = len(coords)
    return [[diff(form.components[j], coords[i]) - diff(form.components[i], coords[j]) for j in range(n)]
            for i in range(n)]


def exterior_derivative_numeric(fn: Callable[[np.ndarray], np.ndarray], points: np.ndarray,
                                h: float = 1e-3) -> np.ndarray:
    """Central-difference exterior derivative of a k-form given as an antisymmetric array field.

    ``fn(points)`` returns shape ``(N,) + (n,)*k``; the result has shape
    ``(N,) + (n,)*(k+1)`` and is antisymmetric.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[-1]
    parts = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        parts.append((fn(points + e) - fn(points - e)) / (2 * h))
    d = np.stack(parts, axis=1)  # (N, i, ...)
    k = d.ndim - 2
    if k == 0:
        return d
    out = np.zeros_like(d)
    # antisymmetrize over the first index and the k existing ones
    for perm in itertools.permutations(range(k + 1)):
        sign = _perm_sign(perm)
        out += sign * np.transpose(d, (0,) + tuple(1 + p for p in perm))
    return out / math.factorial(k)


def _perm_sign(perm) -> int:
    sign = 1
    perm = list(perm)
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            sign = -sign
    return sign


@dataclass
class Curvature:
    """The curvature d chi on X and its projection F_ab to the base."""

    gf: GroupFibering
    dchi: list
    fiber_witness: float

    def on_x(self, points: np.ndarray) -> np.ndarray:
        b = self.gf.chart.bindings(points)
        n = len(self.dchi)
        return np.stack([np.stack([np.broadcast_to(np.asarray(evaluate(self.dchi[i][j], b), float),
                                                   np.shape(points)[:-1]) for j in range(n)], axis=-1)
                         for i in range(n)], axis=-2)

    def projected(self, y: np.ndarray, s=None) -> np.ndarray:
        """F_ab(y) = d chi(dPhi/dy_a, dPhi/dy_b), evaluated on the section at parameter s."""
        y = np.asarray(y, dtype=float)
        gf = self.gf
        if s is None:
            s = gf.fiber_range[0] if gf.topology == "circle" else 0.5 * sum(gf.fiber_range)
        s = np.broadcast_to(np.asarray(s, float), y.shape[:-1])
        x = gf.lift(y, s)
        omega = self.on_x(x)
        b = gf.section_bindings(y, s)
        J = np.stack([np.stack([np.broadcast_to(np.asarray(evaluate(diff(c, a), b), float), y.shape[:-1])
                                for c in gf.section], axis=-1) for a in gf.base.coords], axis=-2)
        return np.einsum("...ai,...ij,...bj->...ab", J, omega, J)


def curvature(chi: OneForm, gf: GroupFibering, seed: int = 42, base_count: int = 50,
              fiber_count: int = 20, tol: float = 1e-7) -> Curvature:
    """Exact d chi and its projection to the base, checked for fiber constancy."""
    if not chi.symbolic:
        raise TypeError("curvature needs a symbolic connection form")
    dchi = _two_form_symbolic(chi)
    cur = Curvature(gf, dchi, 0.0)
    y = gf.base.sample(base_count, seed=seed)
    lo, hi = gf.fiber_range
    svals = lo + (hi - lo) * (np.arange(fiber_count) + 0.5) / fiber_count
    F = np.stack([cur.projected(y, s) for s in svals], axis=0)
    spread = np.max(F, axis=0) - np.min(F, axis=0)
    witness = float(np.max(spread) / (1 + np.max(np.abs(F))))
    cur.fiber_witness = witness
    if witness > tol:
        raise ConnectionError(f"projected curvature varies along fibers (witness {witness:.3g})")
    return cur


def ddchi_defect(chi: OneForm, points: np.ndarray, h: float = 1e-3) -> float:
    """Largest entry of the numeric exterior derivative applied twice to chi."""
    def form(p):
        return chi.evaluate(p)

    def dform(p):
        return exterior_derivative_numeric(form, p, h)

    dd = exterior_derivative_numeric(dform, points, h)
    return float(np.max(np.abs(dd)))


def curvature_invariance_defect(cur: Curvature, generator: Sequence, points: np.ndarray) -> float:
    """Largest |(g^*F)(y) - F(y)| over sample points of the base."""
    base = cur.gf.base
    comps = [as_expr(c) for c in generator]
    b = base.bindings(points)
    img = np.stack([np.broadcast_to(np.asarray(evaluate(c, b), float), points.shape[:-1]) for c in comps],
                   axis=-1)
    J = np.stack([np.stack([np.broadcast_to(np.asarray(evaluate(diff(c, a), b), float), points.shape[:-1])
                            for c in comps], axis=-1) for a in base.coords], axis=-2)
    F_img = cur.projected(img)
    pulled = np.einsum("...ac,...cd,...bd->...ab", J, F_img, J)
    return float(np.max(np.abs(pulled - cur.projected(points))))


# ---------------------------------------------------------------------------
# decomposition chi = p^*chi' + dh
# ---------------------------------------------------------------------------

@dataclass
class Decomposition:
    chi_prime: OneForm
    h: Callable[[np.ndarray, np.ndarray], np.ndarray]
    H: float | None
    residual: float

    def __str__(self):
        period = "none" if self.H is None else f"{self.H:.10g}"
        return f"decomposition residual {self.residual:.3e}, vertical period H = {period}"


def decompose(chi: OneForm, gf: GroupFibering, seed: int = 42, count: int = 50,
              tol: float = DECOMPOSE_TOL) -> Decomposition:
    """Split chi = p^*chi' + dh in the section coordinates (y, s).

    chi' is the fiber average of the horizontal components A_a = chi(dPhi/dy_a);
    h(y, s) is the integral of the vertical component B = chi(dPhi/ds) from
    the start of the fiber range; H is the integral of B over one period for
    circle fibers.  The residual max |A_a - chi'_a - d_a h| over sampled
    points must stay below ``tol``.
    """
    params = list(gf.base.coords) + [gf.fiber_param]
    comps = pullback(chi, gf.section, params)
    A, B = comps[:-1], comps[-1]
    dB = [diff(B, a) for a in gf.base.coords]
    s_nodes, weights = gf.fiber_nodes()
    lo, hi = gf.fiber_range
    m = gf.base.dim

    def fiber_average(bindings: Mapping[str, object], a: int) -> np.ndarray:
        shape = np.broadcast_shapes(*(np.shape(bindings[c]) for c in gf.base.coords))
        acc = np.zeros(shape)
        for s, w in zip(s_nodes, weights):
            b = dict(bindings)
            b[gf.fiber_param] = s
            acc = acc + w * np.broadcast_to(np.asarray(evaluate(A[a], b), float), shape)
        return acc

    chi_prime = OneForm(gf.base, tuple((lambda b, a=a: fiber_average(b, a)) for a in range(m)))
    gl_x, gl_w = np.polynomial.legendre.leggauss(32)

    def integrate_from_start(exprs, y, s):
        """int_{lo}^{s} expr(y, s') ds' for each expr, by Gauss-Legendre."""
        y = np.asarray(y, float)
        s = np.broadcast_to(np.asarray(s, float), y.shape[:-1])
        half = (s - lo) / 2
        out = [np.zeros(y.shape[:-1]) for _ in exprs]
        for xk, wk in zip(gl_x, gl_w):
            sk = lo + half * (xk + 1)
            b = gf.section_bindings(y, sk)
            for i, e in enumerate(exprs):
                out[i] = out[i] + wk * half * np.broadcast_to(np.asarray(evaluate(e, b), float), y.shape[:-1])
        return out

    def h(y, s):
        return integrate_from_start([B], y, s)[0]

    H = None
    if gf.topology == "circle":
        yc = gf.base.sample(count, seed=seed)
        vals = np.zeros(len(yc))
        for s, w in zip(s_nodes, weights):
            vals += w * np.asarray(evaluate(B, gf.section_bindings(yc, np.full(len(yc), s))), float)
        periods = vals * (hi - lo)
        if np.max(periods) - np.min(periods) > tol * (1 + np.max(np.abs(periods))):
            raise DecompositionError("vertical period varies between fibers")
        H = float(np.mean(periods))

    y = gf.base.sample(count, seed=seed + 1)
    s = lo + (hi - lo) * np.linspace(0.1, 0.9, count)
    b = gf.section_bindings(y, s)
    cp = chi_prime.evaluate(y)
    dh = integrate_from_start(dB, y, s)
    worst = 0.0
    for a in range(m):
        Aa = np.broadcast_to(np.asarray(evaluate(A[a], b), float), s.shape)
        worst = max(worst, float(np.max(np.abs(Aa - cp[:, a] - dh[a]))))
    if worst > tol:
        raise DecompositionError(f"chi is not of the form p^*chi' + dh (residual {worst:.3g})")
    return Decomposition(chi_prime, h, H, worst)


# ---------------------------------------------------------------------------
# lifting discrete groups
# ---------------------------------------------------------------------------

@dataclass
class LiftVerdict:
    generator: str
    liftable: bool
    closed_defect: float
    periods: dict = field(default_factory=dict)
    H: float | None = None
    reason: str = ""

    def __str__(self):
        verdict = "LIFTABLE" if self.liftable else "NOT LIFTABLE"
        per = ", ".join(f"{k}={v:.10g}" for k, v in self.periods.items()) or "none"
        H = "none" if self.H is None else f"{self.H:.10g}"
        text = f"{self.generator}: {verdict} (d omega defect {self.closed_defect:.3e}; periods {per}; H = {H})"
        return text + (f" [{self.reason}]" if self.reason else "")


def _difference_form(chi_prime: OneForm, generator: Sequence[Expr]):
    base = chi_prime.chart
    comps = [as_expr(c) for c in generator]
    jac = [[diff(c, a) for c in comps] for a in base.coords]

    def omega(points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, float)
        b = base.bindings(points)
        shape = points.shape[:-1]
        img = np.stack([np.broadcast_to(np.asarray(evaluate(c, b), float), shape) for c in comps], axis=-1)
        at_img = chi_prime.evaluate(img)
        here = chi_prime.evaluate(points)
        out = np.empty(shape + (base.dim,))
        for a in range(base.dim):
            acc = np.zeros(shape)
            for c in range(base.dim):
                acc = acc + at_img[..., c] * np.broadcast_to(np.asarray(evaluate(jac[a][c], b), float), shape)
            out[..., a] = acc - here[..., a]
        return out

    return omega


def lift_check(gf: GroupFibering, chi_prime: OneForm, H: float | None, generators: Mapping[str, Sequence],
               loops: Sequence[Loop], seed: int = 42, count: int = 50,
               closed_tol: float = CLOSED_TOL, period_tol: float = PERIOD_TOL) -> list[LiftVerdict]:
    """Decide for each generator g whether omega = g^*chi' - chi' meets the lifting criterion.

    omega must be closed (numeric d omega below ``closed_tol`` at sampled base
    points) and its periods over ``loops`` must vanish (line fibers) or be
    integer multiples of H (circle fibers).
    """
    if not loops:
        raise ConnectionError("lift check needs at least one loop")
    if gf.topology == "circle" and not H:
        raise ConnectionError("circle fibers need a nonzero vertical period H")
    pts = gf.base.sample(count, seed=seed, margin=0.05)
    verdicts = []
    for name, gen in generators.items():
        omega = _difference_form(chi_prime, gen)
        d = exterior_derivative_numeric(omega, pts, h=1e-4)
        closed = float(np.max(np.abs(d)))
        periods = {}
        for loop in loops:
            def integrand(t, loop=loop):
                tt = np.array([t])
                return float(np.sum(omega(loop.at(tt)) * loop.velocity(tt)))
            val, err = integrate.quad(integrand, 0.0, 1.0, epsabs=1e-12, epsrel=1e-12, limit=200)
            if not np.isfinite(val) or err > 1e-8:
                raise ConnectionError(f"period over loop {loop.name} did not converge (error {err:.3g})")
            periods[loop.name] = float(val)
        reason = ""
        if closed >= closed_tol:
            ok, reason = False, "difference form is not closed"
        elif gf.topology == "line":
            ok = all(abs(p) < period_tol for p in periods.values())
            reason = "" if ok else "nonzero period on line fibers"
        else:
            ok = all(abs(p / H - round(p / H)) < period_tol * (1 + abs(p / H)) for p in periods.values())
            reason = "" if ok else "period is not a multiple of H"
        verdicts.append(LiftVerdict(name, ok, closed, periods, H, reason))
    return verdicts
