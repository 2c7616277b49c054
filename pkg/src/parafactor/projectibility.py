"""Projectibility of operators along maps p: X -> Y.

An operator L on X is projected along p when L(phi o p) is constant on every
fiber of p for all functions phi on Y; the reduced operator L' is then
defined by L(phi o p) = (L' phi) o p.  Here constancy is tested on sampled
fibers and L' is recovered numerically from test-function responses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .expr import ZERO, Const, Expr, Var, as_expr, diff, evaluate, parse, substitute
from .geometry import Chart, halton_box
from .operators import (NumericCoefficient, OperatorCoefficients, ParabolicOperator,
                        apply_jets, coefficient_variables)
from .solver import Grid, GridField

__all__ = [
    "SmoothMap", "Fibering", "FiberReport", "ProjectionReport", "ConformalReport",
    "InconclusiveError", "ProjectionError", "fiber_constancy", "project_operator",
    "conformal_factor_check", "quotient_consistency", "compare_operators",
    "U_SAMPLES", "FIBER_THRESHOLD", "FIBER_THRESHOLD_NUMERIC",
]

FIBER_THRESHOLD = 1e-7
FIBER_THRESHOLD_NUMERIC = 1e-5
U_SAMPLES = (-1.0, -0.3, 0.1, 0.7, 2.0)
COND_LIMIT = 1e8


class InconclusiveError(RuntimeError):
    """Too many fiber samples fell outside the source chart."""


class ProjectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SmoothMap:
    source: Chart
    target: Chart
    components: tuple[Expr, ...]

    def __post_init__(self):
        comps = tuple(as_expr(c) for c in self.components)
        if len(comps) != self.target.dim:
            raise ValueError("one component per target coordinate required")
        if self.target.dim > self.source.dim:
            raise ValueError("target dimension exceeds source dimension")
        extra = set().union(*(c.free_variables for c in comps)) - set(self.source.coords)
        if extra:
            raise ValueError(f"map components use unknown variables {sorted(extra)}")
        object.__setattr__(self, "components", comps)

    def raw(self, points: np.ndarray) -> np.ndarray:
        """Component values without reducing periodic target coordinates."""
        points = np.asarray(points, dtype=float)
        b = self.source.bindings(points)
        return np.stack([np.broadcast_to(np.asarray(evaluate(c, b), dtype=float), points.shape[:-1])
                         for c in self.components], axis=-1)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.target.wrap(self.raw(points))


@dataclass(frozen=True)
class Fibering:
    """A map together with explicit fiber parametrizations.

    ``sheets`` holds one or more parametrizations x(y, s) (each a tuple of
    source-coordinate expressions in the target coordinates and the fiber
    parameters); the fiber over y is the union of all sheets.  Several sheets
    encode identifications such as a glide reflection.
    """

    map: SmoothMap
    fiber: Chart | None
    sheets: tuple[tuple[Expr, ...], ...]

    def __post_init__(self):
        sheets = tuple(tuple(as_expr(c) for c in sheet) for sheet in self.sheets)
        n = self.map.source.dim
        if not sheets or any(len(s) != n for s in sheets):
            raise ValueError("each sheet must give one expression per source coordinate")
        allowed = set(self.map.target.coords) | set(self.fiber.coords if self.fiber else ())
        for sheet in sheets:
            extra = set().union(*(c.free_variables for c in sheet)) - allowed
            if extra:
                raise ValueError(f"fiber parametrization uses unknown variables {sorted(extra)}")
        object.__setattr__(self, "sheets", sheets)

    @property
    def source(self) -> Chart:
        return self.map.source

    @property
    def target(self) -> Chart:
        return self.map.target

    def fiber_samples(self, count: int, seed: int) -> np.ndarray:
        if self.fiber is None:
            return np.zeros((1, 0))
        return halton_box(self.fiber.lower, self.fiber.upper, count, seed)

    def points(self, y: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Source points for every (y, s, sheet); shape ``(len(y), sheets*len(s), n)``."""
        y = np.asarray(y, dtype=float)
        s = np.asarray(s, dtype=float)
        yy = np.repeat(y[:, None, :], len(s), axis=1)
        ss = np.repeat(s[None, :, :], len(y), axis=0)
        b = self.target.bindings(yy)
        if self.fiber is not None:
            b.update(self.fiber.bindings(ss))
        out = []
        for sheet in self.sheets:
            out.append(np.stack([np.broadcast_to(np.asarray(evaluate(c, b), dtype=float), yy.shape[:-1])
                                 for c in sheet], axis=-1))
        return np.concatenate(out, axis=1)

    def check(self, count: int = 50, fiber_count: int = 20, seed: int = 0, tol: float = 1e-10) -> float:
        """Largest |p(x(y, s)) - y| (periodic coordinates compared modulo the period)."""
        y = self.target.sample(count, seed=seed)
        s = self.fiber_samples(fiber_count, seed + 1)
        x = self.points(y, s)
        img = self.map.raw(x)
        gap = img - y[:, None, :]
        for k, iv in enumerate(self.target.intervals):
            if iv.periodic:
                gap[..., k] -= iv.length * np.round(gap[..., k] / iv.length)
        worst = float(np.max(np.abs(gap)))
        if worst > tol:
            raise ValueError(f"fiber parametrization does not lie in the fibers (gap {worst:.3g})")
        return worst


@dataclass
class FiberReport:
    constant: bool
    witness: float
    threshold: float
    location: tuple | None
    skipped: int
    total: int
    scale: float = 0.0

    def __str__(self):
        verdict = "constant" if self.constant else "NOT constant"
        return (f"fiber {verdict}: witness {self.witness:.3e} (threshold {self.threshold:.1e}), "
                f"{self.skipped}/{self.total} samples skipped")


def _fiber_cloud(fib: Fibering, seed: int, base_count: int, fiber_count: int, base_points=None):
    y = fib.target.sample(base_count, seed=seed) if base_points is None else np.asarray(base_points, float)
    s = fib.fiber_samples(fiber_count, seed + 1)
    x = fib.points(y, s)
    inside = fib.source.contains(x)
    return y, x, inside


def _spread(values: np.ndarray, inside: np.ndarray, y: np.ndarray, threshold: float,
            skipped: int, total: int) -> FiberReport:
    usable = np.sum(inside, axis=1) >= 2
    vals = np.where(inside & usable[:, None], values, np.nan)
    vals[~usable] = 0.0
    with np.errstate(invalid="ignore"):
        spread = np.where(usable, np.nanmax(vals, axis=1) - np.nanmin(vals, axis=1), 0.0)
    scale = float(np.nanmax(np.abs(vals))) if np.any(inside) else 0.0
    witness = spread / (1.0 + scale)
    k = int(np.argmax(witness))
    w = float(witness[k])
    return FiberReport(w < threshold, w, threshold, tuple(float(c) for c in y[k]), skipped, total, scale)


def fiber_constancy(fld, fib: Fibering, seed: int = 42, base_count: int = 50, fiber_count: int = 20,
                    threshold: float = FIBER_THRESHOLD, base_points=None) -> FiberReport:
    """Test whether a scalar field on X is constant along the fibers of ``fib``.

    ``fld`` is an expression in the source coordinates or a callable taking an
    array of source points.  The witness is the largest per-fiber spread,
    divided by 1 + max|fld|.  Fiber samples outside the source chart are
    skipped; if more than half are skipped the test is inconclusive.
    """
    y, x, inside = _fiber_cloud(fib, seed, base_count, fiber_count, base_points)
    total = inside.size
    skipped = int(total - inside.sum())
    if skipped > total / 2:
        raise InconclusiveError(f"{skipped} of {total} fiber samples lie outside the source chart")
    xw = fib.source.wrap(x)
    if isinstance(fld, (Expr, str, int, float)):
        e = as_expr(fld)
        values = np.broadcast_to(np.asarray(evaluate(e, fib.source.bindings(xw), strict=False), float),
                                 inside.shape)
    else:
        values = np.asarray(fld(xw), dtype=float)
    return _spread(values, inside, y, threshold, skipped, total)


# ---------------------------------------------------------------------------
# operator projection
# ---------------------------------------------------------------------------

def _center(k: int) -> str:
    return f"__c{k}"


def _probe_functions(coords: Sequence[str]) -> list[tuple[str, Expr]]:
    """Test functions on Y written in offsets d_k = y_k - c_k from a moving center."""
    m = len(coords)
    d = [Var(c) - Var(_center(k)) for k, c in enumerate(coords)]
    out: list[tuple[str, Expr]] = [("1", Const(1.0))]
    for k in range(m):
        out.append((f"d{k}", d[k]))
        out.append((f"2d{k}", Const(2.0) * d[k]))
    for k, l in itertools.combinations(range(m), 2):
        out.append((f"d{k}+d{l}", d[k] + d[l]))
    for k in range(m):
        for l in range(k, m):
            out.append((f"d{k}d{l}", d[k] * d[l]))
    a, b = d[0], d[1 % m]
    smooth = {
        "sin": "sin(_a + 0.3*_b)",
        "exp": "exp(0.5*_a - 0.2*_b)",
        "cos": "cos(0.8*_a)*(1 + _b)",
        "rat": "1/(1 + _a + 0.5*_b^2)",
    }
    for name, src in smooth.items():
        out.append((name, substitute(parse(src), {"_a": a, "_b": b})))
    return out


def _jets_at_center(phi: Expr, coords: Sequence[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian of phi at its own center (offsets zero)."""
    m = len(coords)
    b = {c: 0.0 for c in coords}
    b.update({_center(k): 0.0 for k in range(m)})
    grad = np.array([float(evaluate(diff(phi, c), b)) for c in coords])
    hess = np.array([[float(evaluate(diff(diff(phi, a), c), b)) for c in coords] for a in coords])
    return float(evaluate(phi, b)), grad, hess


def _design_row(grad: np.ndarray, hess: np.ndarray) -> np.ndarray:
    """Coefficients of the unknowns (b2 upper, c2 upper, b1, q) in L'phi at the center."""
    m = len(grad)
    row = []
    for k in range(m):
        for l in range(k, m):
            row.append(hess[k, l] * (1 if k == l else 2))
    for k in range(m):
        for l in range(k, m):
            row.append(grad[k] * grad[l] * (1 if k == l else 2))
    row.extend(grad)
    row.append(1.0)
    return np.array(row)


class _Composer:
    """Evaluates L(phi o p) at source points with exact derivatives of the composition."""

    def __init__(self, L: ParabolicOperator, fmap: SmoothMap):
        self.L = L
        self.map = fmap
        self.coords = L.chart.coords
        self.subst = dict(zip(fmap.target.coords, fmap.components))
        self._cache: dict = {}

    def __call__(self, phi: Expr, x: np.ndarray, u: float) -> np.ndarray:
        """x has shape batch + (n,)."""
        key = (id(x), u)
        if key not in self._cache:
            self._cache.clear()
            b = self.L.chart.bindings(x, u=u, t=0.0)
            centers = self.map.raw(x)
            for k in range(centers.shape[-1]):
                b[_center(k)] = centers[..., k]
            self._cache[key] = (b, self.L.coefficients(b), x)
        b, co, _ = self._cache[key]
        f = substitute(phi, self.subst)
        shape = x.shape[:-1]
        n = len(self.coords)
        grad = np.empty(shape + (n,))
        hess = np.empty(shape + (n, n))
        first = [diff(f, c) for c in self.coords]
        for i in range(n):
            grad[..., i] = np.broadcast_to(evaluate(first[i], b), shape)
            for j in range(i, n):
                hess[..., i, j] = hess[..., j, i] = np.broadcast_to(evaluate(diff(first[i], self.coords[j]), b),
                                                                    shape)
        return apply_jets(co, grad, hess)


@dataclass
class ProjectionReport:
    projectible: bool
    witness: float
    threshold: float
    location: tuple | None
    reduced: ParabolicOperator | None = None
    tables: dict = field(default_factory=dict)
    grid: Grid | None = None
    deviation: float | None = None
    condition: float = 0.0
    u_values: tuple = ()
    skipped: int = 0
    worst_function: str = ""
    pe_prime_defect: float | None = None

    def __str__(self):
        verdict = "projectible" if self.projectible else "NOT projectible"
        loc = ", ".join(f"{v:.4g}" for v in self.location) if self.location else "-"
        text = (f"{verdict}: fiber witness {self.witness:.3e} (threshold {self.threshold:.1e}) "
                f"at y = ({loc})")
        if self.deviation is not None:
            text += f"; max deviation from expected reduced operator {self.deviation:.3e}"
        return text


def _unknown_names(coords: Sequence[str]) -> list[str]:
    m = len(coords)
    names = []
    for prefix in ("b2", "c2"):
        for k in range(m):
            for l in range(k, m):
                names.append(f"{prefix}[{coords[k]},{coords[l]}]")
    names += [f"b1[{c}]" for c in coords]
    names.append("q")
    return names


def _table_grid(target: Chart, nodes: int) -> Grid:
    return Grid(target, tuple(nodes for _ in target.coords))


class _TableCoefficient:
    """Cubic interpolation of a coefficient table on the Y grid (and across u samples)."""

    def __init__(self, grid: Grid, tables: np.ndarray, u_values: Sequence[float]):
        self.grid = grid
        self.fields = [GridField(grid, (0.0,), t[None]) for t in tables]
        self.u_values = np.asarray(u_values, dtype=float)

    def __call__(self, bindings: Mapping[str, object]) -> np.ndarray:
        coords = self.grid.chart.coords
        shape = np.broadcast_shapes(*(np.shape(bindings[c]) for c in coords))
        pts = np.stack([np.broadcast_to(np.asarray(bindings[c], float), shape) for c in coords], axis=-1)
        vals = np.stack([f.interpolate(pts) for f in self.fields], axis=0)
        if len(self.fields) == 1:
            return vals[0]
        u = np.broadcast_to(np.asarray(bindings["u"], float), shape)
        weights = self.basis(u)  # shape + (n_u,)
        return np.einsum("...j,j...->...", weights, vals)

    @property
    def basis(self) -> CubicSpline:
        return CubicSpline(self.u_values, np.eye(len(self.u_values)), axis=0)


def _build_reduced(target: Chart, grid: Grid, tables: np.ndarray, u_values, names) -> ParabolicOperator:
    """tables: (n_u, n_unknowns) + grid.shape."""
    m = target.dim
    variables = frozenset(target.coords) | (frozenset({"u"}) if len(u_values) > 1 else frozenset())

    def coef(idx):
        data = tables[:, idx]
        if np.all(data == 0):
            return ZERO
        return NumericCoefficient(_TableCoefficient(grid, data, u_values), variables)

    b2 = [[ZERO] * m for _ in range(m)]
    c2 = [[ZERO] * m for _ in range(m)]
    idx = 0
    for mat in (b2, c2):
        for k in range(m):
            for l in range(k, m):
                mat[k][l] = mat[l][k] = coef(idx)
                idx += 1
    b1 = [coef(idx + k) for k in range(m)]
    q = coef(idx + m)
    return ParabolicOperator(target, tuple(map(tuple, b2)), tuple(map(tuple, c2)), tuple(b1), q)


def _expected_tables(expected: ParabolicOperator, grid: Grid, u_values) -> np.ndarray:
    m = grid.dim
    out = []
    for u in u_values:
        co = expected.coefficients(grid.bindings(u=u, t=0.0))
        rows = []
        for mat in (co.b2, co.c2):
            for k in range(m):
                for l in range(k, m):
                    rows.append(mat[..., k, l])
        rows += [co.b1[..., k] for k in range(m)]
        rows.append(np.broadcast_to(co.q, grid.shape))
        out.append(np.stack([np.broadcast_to(r, grid.shape) for r in rows]))
    return np.stack(out)


def _uses_numeric(L: ParabolicOperator) -> bool:
    return any(isinstance(c, NumericCoefficient) for c in L.all_coefficients())


def project_operator(L: ParabolicOperator, fib: Fibering, expected: ParabolicOperator | None = None,
                     seed: int = 42, table_nodes: int = 33, threshold: float | None = None,
                     base_count: int = 50, fiber_count: int = 20, u_values=None) -> ProjectionReport:
    """Decide whether ``L`` is projected along ``fib`` and recover the reduced operator.

    Test functions phi on Y (constant, linear, quadratic and four smooth
    non-polynomial ones, each centered at the image point) are pulled back and
    L(phi o p) is checked for constancy along sampled fibers.  If all pass,
    the reduced coefficients at each node of a regular Y grid follow from a
    least-squares fit of the fiber-averaged responses; the tables are
    interpolated with cubic splines.
    """
    if not L.autonomous:
        raise ProjectionError("projection requires an autonomous operator")
    if L.chart.coords != fib.source.coords:
        raise ProjectionError("operator and fibering live on different charts")
    if threshold is None:
        threshold = FIBER_THRESHOLD_NUMERIC if _uses_numeric(L) else FIBER_THRESHOLD
    if u_values is None:
        u_values = U_SAMPLES if L.depends_on("u") else (0.0,)
    u_values = tuple(float(u) for u in u_values)
    target = fib.target
    probes = _probe_functions(target.coords)
    rows = []
    for _, phi in probes:
        _, grad, hess = _jets_at_center(phi, target.coords)
        rows.append(_design_row(grad, hess))
    A = np.array(rows)
    cond = float(np.linalg.cond(A))
    if cond > COND_LIMIT:
        raise ProjectionError(f"reduced-coefficient system is ill-conditioned (cond {cond:.3g})")
    compose = _Composer(L, fib.map)

    # constancy along fibers at sampled base points
    y, x, inside = _fiber_cloud(fib, seed, base_count, fiber_count)
    skipped = int(inside.size - inside.sum())
    if skipped > inside.size / 2:
        raise InconclusiveError(f"{skipped} of {inside.size} fiber samples lie outside the source chart")
    x = fib.source.wrap(x)
    worst = FiberReport(True, 0.0, threshold, None, skipped, inside.size)
    worst_name = ""
    for u in u_values:
        for name, phi in probes:
            vals = compose(phi, x, u)
            rep = _spread(vals, inside, y, threshold, skipped, inside.size)
            if rep.witness >= worst.witness:
                worst, worst_name = rep, name
    report = ProjectionReport(worst.witness < threshold, worst.witness, threshold, worst.location,
                              condition=cond, u_values=u_values, skipped=skipped, worst_function=worst_name)
    if not report.projectible:
        return report

    # reduced coefficient tables
    grid = _table_grid(target, table_nodes)
    nodes = grid.points().reshape(-1, target.dim)
    yt, xt, inside_t = _fiber_cloud(fib, seed + 7, 0, max(4, fiber_count // 4), base_points=nodes)
    empty = ~inside_t.any(axis=1)
    if np.any(empty):
        bad = nodes[np.argmax(empty)]
        raise InconclusiveError(f"no fiber sample inside the source chart over y = {tuple(bad)}")
    xt = fib.source.wrap(xt)
    pinv = np.linalg.pinv(A)
    names = _unknown_names(target.coords)
    tables = []
    for u in u_values:
        resp = []
        for _, phi in probes:
            vals = compose(phi, xt, u)
            resp.append(np.nanmean(np.where(inside_t, vals, np.nan), axis=1))
        sol = pinv @ np.array(resp)
        tables.append(sol.reshape((len(names),) + grid.shape))
    tables = np.stack(tables)
    report.grid = grid
    report.tables = {name: tables[:, i] for i, name in enumerate(names)}
    report.reduced = _build_reduced(target, grid, tables, u_values, names)
    if expected is not None:
        report.deviation = float(np.max(np.abs(tables - _expected_tables(expected, grid, u_values))))
    return report


def compare_operators(A: ParabolicOperator, B: ParabolicOperator, points: np.ndarray,
                      u_values=(0.0,)) -> float:
    """Largest coefficient-wise difference of two operators at sample points."""
    worst = 0.0
    for u in u_values:
        b = A.chart.bindings(points, u=u, t=0.0)
        ca, cb = A.coefficients(b), B.coefficients(b)
        for name in ("b2", "c2", "b1", "q"):
            worst = max(worst, float(np.max(np.abs(getattr(ca, name) - getattr(cb, name)))))
    return worst


# ---------------------------------------------------------------------------
# planar conformal maps and quotient consistency
# ---------------------------------------------------------------------------

@dataclass
class ConformalReport:
    passed: bool
    max_relative_deviation: float
    threshold: float
    location: tuple | None
    evaluated: int

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"conformal factor {verdict}: max relative deviation {self.max_relative_deviation:.3e} "
                f"(threshold {self.threshold:.1e}) over {self.evaluated} points")


def conformal_factor_check(map2d: SmoothMap, lam, points=None, count: int = 200, seed: int = 42,
                           threshold: float = 1e-9) -> ConformalReport:
    """Compare sqrt|det J| of a planar map with a claimed modulus of its derivative.

    For a holomorphic map written as (Re, Im) components, sqrt|det J| = |y'|.
    Sample points near the chart's excluded points are skipped.
    """
    chart = map2d.source
    if chart.dim != 2 or map2d.target.dim != 2:
        raise ValueError("conformal factor check needs a map between planar charts")
    lam = as_expr(lam)
    if points is None:
        points = chart.sample(count, seed=seed)
    points = np.asarray(points, dtype=float)
    points = points[~chart.near_excluded(points)]
    b = chart.bindings(points)
    a, c = chart.coords
    J = [[np.broadcast_to(np.asarray(evaluate(diff(comp, v), b), float), points.shape[:1])
          for v in (a, c)] for comp in map2d.components]
    det = J[0][0] * J[1][1] - J[0][1] * J[1][0]
    modulus = np.sqrt(np.abs(det))
    target = np.broadcast_to(np.asarray(evaluate(lam, b), float), points.shape[:1])
    rel = np.abs(modulus - target) / np.abs(target)
    k = int(np.argmax(rel))
    worst = float(rel[k])
    return ConformalReport(worst < threshold, worst, threshold, tuple(points[k]), len(points))


def quotient_consistency(chart: Chart, components: Sequence, T: Sequence, points=None, count: int = 200,
                         seed: int = 42) -> tuple[float, int]:
    """Largest |p(x) - p(T x)| over sample points where T is defined.

    ``components`` are the expressions of p (any number of them, so maps
    into a higher-dimensional embedding space are allowed).  Returns the gap
    and the number of points evaluated.
    """
    comps = [as_expr(c) for c in components]
    T = [as_expr(c) for c in T]
    if points is None:
        points = chart.sample(count, seed=seed)
    points = np.asarray(points, dtype=float)

    def values(e_list, pts):
        b = chart.bindings(pts)
        with np.errstate(all="ignore"):
            return np.stack([np.broadcast_to(np.asarray(evaluate(c, b, strict=False), float), pts.shape[:1])
                             for c in e_list], axis=-1)

    images = values(T, points)
    here = values(comps, points)
    ok = np.all(np.isfinite(images), axis=-1) & np.all(np.isfinite(here), axis=-1)
    there = values(comps, images[ok])
    gap = np.max(np.abs(here[ok] - there)) if ok.any() else np.inf
    return float(gap), int(ok.sum())
