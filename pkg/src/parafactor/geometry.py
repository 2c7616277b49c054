"""Chart-based Riemannian data and the Laplace-Beltrami operator."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import qmc

from .expr import ONE, ZERO, Const, DomainError, Expr, as_expr, diff, evaluate
from .operators import NumericCoefficient, ParabolicOperator

__all__ = [
    "Interval", "Chart", "MetricField", "VectorField", "MetricError",
    "metric_inverse", "laplace_beltrami", "laplace_beltrami_numeric",
    "inner", "theta_field", "euclidean", "symbolic_inverse",
    "SYMBOLIC_MAX_DIM", "EXCLUDE_RADIUS",
]

# Above this dimension the Laplace-Beltrami coefficients are computed
# numerically per point instead of through a symbolic adjugate.
SYMBOLIC_MAX_DIM = 3
EXCLUDE_RADIUS = 1e-3


class MetricError(ValueError):
    """A metric violates symmetry / positive-definiteness, or is singular."""


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    periodic: bool = False

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @property
    def length(self) -> float:
        return self.hi - self.lo

    @property
    def period(self) -> float | None:
        return self.length if self.periodic else None


@dataclass(frozen=True)
class Chart:
    """A coordinate box, optionally periodic per axis and punctured at points."""

    coords: tuple[str, ...]
    intervals: tuple[Interval, ...]
    excluded: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(self.coords))
        object.__setattr__(self, "intervals", tuple(self.intervals))
        object.__setattr__(self, "excluded", tuple(tuple(float(c) for c in p) for p in self.excluded))
        if len(self.coords) < 1:
            raise ValueError("a chart needs at least one coordinate")
        if len(self.intervals) != len(self.coords):
            raise ValueError("one interval per coordinate required")
        if len(set(self.coords)) != len(self.coords):
            raise ValueError("duplicate coordinate names")
        for p in self.excluded:
            if len(p) != self.dim:
                raise ValueError(f"excluded point {p} has wrong dimension")

    @classmethod
    def box(cls, coords: Sequence[str], bounds: Sequence[tuple], excluded=()) -> "Chart":
        """``bounds`` holds ``(lo, hi)`` or ``(lo, hi, periodic)`` per coordinate."""
        return cls(tuple(coords), tuple(Interval(*b) for b in bounds), tuple(excluded))

    @property
    def dim(self) -> int:
        return len(self.coords)

    @property
    def lower(self) -> np.ndarray:
        return np.array([iv.lo for iv in self.intervals])

    @property
    def upper(self) -> np.ndarray:
        return np.array([iv.hi for iv in self.intervals])

    @property
    def periodic(self) -> np.ndarray:
        return np.array([iv.periodic for iv in self.intervals])

    def bindings(self, points: np.ndarray, **extra) -> dict:
        points = np.asarray(points, dtype=float)
        out = {name: points[..., k] for k, name in enumerate(self.coords)}
        out.update(extra)
        return out

    def wrap(self, points: np.ndarray) -> np.ndarray:
        """Reduce periodic coordinates into their fundamental interval."""
        points = np.array(points, dtype=float, copy=True)
        for k, iv in enumerate(self.intervals):
            if iv.periodic:
                points[..., k] = iv.lo + np.mod(points[..., k] - iv.lo, iv.length)
        return points

    def near_excluded(self, points: np.ndarray, radius: float = EXCLUDE_RADIUS) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        bad = np.zeros(points.shape[:-1], dtype=bool)
        for p in self.excluded:
            bad |= np.linalg.norm(points - np.asarray(p), axis=-1) < radius
        return bad

    def contains(self, points: np.ndarray, tol: float = 1e-12,
                 radius: float = EXCLUDE_RADIUS) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        ok = np.ones(points.shape[:-1], dtype=bool)
        for k, iv in enumerate(self.intervals):
            if not iv.periodic:
                ok &= (points[..., k] >= iv.lo - tol) & (points[..., k] <= iv.hi + tol)
        return ok & ~self.near_excluded(self.wrap(points), radius)

    def sample(self, count: int = 200, seed: int = 0, margin: float = 0.0,
               radius: float = EXCLUDE_RADIUS) -> np.ndarray:
        """Deterministic scrambled-Halton points inside the chart.

        ``margin`` is a fraction of each non-periodic interval kept clear of
        the boundary; points within ``radius`` of an excluded point are dropped.
        """
        return halton_box(self.lower, self.upper, count, seed,
                          margin=np.where(self.periodic, 0.0, margin),
                          reject=lambda p: self.near_excluded(p, radius))


def halton_box(lo, hi, count: int, seed: int, margin=0.0, reject=None) -> np.ndarray:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    span = hi - lo
    lo = lo + margin * span
    hi = hi - margin * span
    sampler = qmc.Halton(d=len(lo), scramble=True, seed=seed)
    out = np.empty((0, len(lo)))
    while len(out) < count:
        pts = lo + sampler.random(max(count, 16)) * (hi - lo)
        if reject is not None:
            pts = pts[~reject(pts)]
        out = np.vstack([out, pts])
    return out[:count]


def _broadcast(value, shape) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


def _bindings_shape(bindings: Mapping[str, object], names: Sequence[str]) -> tuple:
    return np.broadcast_shapes(*(np.shape(bindings[n]) for n in names))


@dataclass(frozen=True)
class MetricField:
    """Symmetric positive-definite matrix of expressions over a chart."""

    chart: Chart
    g: tuple[tuple[Expr, ...], ...]

    def __post_init__(self):
        g = tuple(tuple(as_expr(e) for e in row) for row in self.g)
        n = self.chart.dim
        if len(g) != n or any(len(row) != n for row in g):
            raise MetricError(f"metric must be {n}x{n}")
        object.__setattr__(self, "g", g)

    @property
    def dim(self) -> int:
        return self.chart.dim

    def evaluate(self, bindings: Mapping[str, object]) -> np.ndarray:
        """Metric matrices, shape ``batch + (n, n)``."""
        shape = _bindings_shape(bindings, self.chart.coords)
        n = self.dim
        out = np.empty(shape + (n, n))
        for i in range(n):
            for j in range(n):
                out[..., i, j] = _broadcast(evaluate(self.g[i][j], bindings), shape)
        return out

    def at(self, points: np.ndarray) -> np.ndarray:
        return self.evaluate(self.chart.bindings(points))

    def symmetry_defects(self, points: np.ndarray, tol: float = 1e-12) -> list[tuple[str, str, float]]:
        """Entries (i, j) where g_ij and g_ji differ at the sampled points."""
        bad = []
        names = self.chart.coords
        b = self.chart.bindings(points)
        for i, j in itertools.combinations(range(self.dim), 2):
            if self.g[i][j] == self.g[j][i]:
                continue
            gap = np.max(np.abs(np.asarray(evaluate(self.g[i][j], b) - evaluate(self.g[j][i], b))))
            if gap > tol:
                bad.append((names[i], names[j], float(gap)))
        return bad

    def check(self, points: np.ndarray) -> None:
        """Raise :class:`MetricError` unless symmetric and positive-definite at ``points``."""
        bad = self.symmetry_defects(points)
        if bad:
            i, j, gap = bad[0]
            raise MetricError(f"metric not symmetric: g({i},{j}) != g({j},{i}) (gap {gap:.3g})")
        mats = self.at(points)
        for k in range(1, self.dim + 1):
            minors = np.linalg.det(mats[..., :k, :k])
            if np.any(minors <= 0):
                where = np.argmin(minors)
                raise MetricError(
                    f"metric not positive-definite at {tuple(np.round(points[where], 6))}: "
                    f"leading minor {k} = {minors[where]:.3g}")


@dataclass(frozen=True)
class VectorField:
    chart: Chart
    components: tuple[Expr, ...]

    def __post_init__(self):
        comps = tuple(as_expr(c) for c in self.components)
        if len(comps) != self.chart.dim:
            raise ValueError("one component per coordinate required")
        object.__setattr__(self, "components", comps)


def euclidean(chart: Chart) -> MetricField:
    n = chart.dim
    return MetricField(chart, tuple(tuple(ONE if i == j else ZERO for j in range(n)) for i in range(n)))


# ---------------------------------------------------------------------------
# inverse metric
# ---------------------------------------------------------------------------

def _check_inverse_input(mats: np.ndarray, bindings, chart: Chart):
    dets = np.linalg.det(mats)
    scale = np.max(np.abs(mats), axis=(-1, -2)) ** mats.shape[-1]
    singular = ~(np.abs(dets) > 1e-13 * np.maximum(scale, 1e-300))
    if np.any(singular):
        idx = np.unravel_index(np.argmax(singular), singular.shape)
        point = tuple(float(np.broadcast_to(bindings[c], singular.shape)[idx]) for c in chart.coords)
        raise DomainError(f"singular metric at {point}")


def metric_inverse(g: MetricField):
    """Return ``inverse(bindings) -> g^{ij}`` evaluated numerically per point."""

    def inverse(bindings: Mapping[str, object]) -> np.ndarray:
        mats = g.evaluate(bindings)
        _check_inverse_input(mats, bindings, g.chart)
        inv = np.linalg.inv(mats)
        return 0.5 * (inv + np.swapaxes(inv, -1, -2))

    return inverse


def _det(m: list[list[Expr]]) -> Expr:
    n = len(m)
    if n == 1:
        return m[0][0]
    if n == 2:
        return m[0][0] * m[1][1] - m[0][1] * m[1][0]
    total: Expr = ZERO
    for j in range(n):
        minor = [row[:j] + row[j + 1:] for row in m[1:]]
        term = m[0][j] * _det(minor)
        total = total + term if j % 2 == 0 else total - term
    return total


def symbolic_inverse(g: MetricField) -> tuple[list[list[Expr]], Expr]:
    """Adjugate-based inverse ``(g^{ij}, det g)`` as expressions."""
    m = [list(row) for row in g.g]
    n = len(m)
    det = _det(m)
    inv = [[ZERO] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            minor = [row[:i] + row[i + 1:] for k, row in enumerate(m) if k != j]
            cof = _det(minor) if n > 1 else ONE
            if (i + j) % 2:
                cof = -cof
            inv[i][j] = inv[j][i] = cof / det
    return inv, det


# ---------------------------------------------------------------------------
# Laplace-Beltrami
# ---------------------------------------------------------------------------

class _NumericLaplacian:
    """Per-point g^{ij} and first-order coefficients from exact metric derivatives.

    Uses d_k g^{ij} = -g^{ia} (d_k g_ab) g^{bj} and d_k log sqrt|g| = tr(g^{-1} d_k g) / 2,
    so no finite differencing is involved.
    """

    def __init__(self, g: MetricField):
        self.metric = g
        coords = g.chart.coords
        self.dg = [[[diff(g.g[a][b], x) for b in range(g.dim)] for a in range(g.dim)] for x in coords]
        self._inverse = metric_inverse(g)
        self._last = None

    def __call__(self, bindings):
        if self._last is not None and self._last[0] is bindings:
            return self._last[1]
        g = self.metric
        n = g.dim
        ginv = self._inverse(bindings)
        shape = ginv.shape[:-2]
        b1 = np.zeros(shape + (n,))
        for k in range(n):
            dgk = np.empty(shape + (n, n))
            for a in range(n):
                for b in range(n):
                    dgk[..., a, b] = _broadcast(evaluate(self.dg[k][a][b], bindings), shape)
            # row k of d_k g^{..}: -g^{ka} dg_ab g^{bj}
            d_inv_row = -np.einsum("...a,...ab,...bj->...j", ginv[..., k, :], dgk, ginv)
            half_trace = 0.5 * np.einsum("...ab,...ba->...", ginv, dgk)
            b1 += d_inv_row + ginv[..., k, :] * half_trace[..., None]
        result = (ginv, b1)
        self._last = (bindings, result)
        return result


def laplace_beltrami_numeric(g: MetricField) -> ParabolicOperator:
    """Laplace-Beltrami operator with per-point numeric coefficients (any dimension)."""
    n = g.dim
    provider = _NumericLaplacian(g)
    coords = frozenset(g.chart.coords)
    b2 = tuple(tuple(NumericCoefficient(lambda b, i=i, j=j: provider(b)[0][..., i, j], coords)
                     for j in range(n)) for i in range(n))
    b1 = tuple(NumericCoefficient(lambda b, j=j: provider(b)[1][..., j], coords) for j in range(n))
    zero = tuple(tuple(ZERO for _ in range(n)) for _ in range(n))
    return ParabolicOperator(g.chart, b2, zero, b1, ZERO, pe_prime=True)


def laplace_beltrami(g: MetricField, symbolic_max_dim: int = SYMBOLIC_MAX_DIM) -> ParabolicOperator:
    """The metric Laplacian as a :class:`ParabolicOperator`.

    Second-order coefficients are g^{ij}; first-order ones are
    |g|^{-1/2} d_i(|g|^{1/2} g^{ij}).  Up to ``symbolic_max_dim`` these are exact
    expressions built from the adjugate; above it they are evaluated numerically
    per point.
    """
    n = g.dim
    if n > symbolic_max_dim:
        return laplace_beltrami_numeric(g)
    inv, det = symbolic_inverse(g)
    coords = g.chart.coords
    half_dlogdet = [diff(det, x) / (Const(2.0) * det) for x in coords]
    b1 = []
    for j in range(n):
        term: Expr = ZERO
        for i in range(n):
            term = term + diff(inv[i][j], coords[i]) + inv[i][j] * half_dlogdet[i]
        b1.append(term)
    zero = tuple(tuple(ZERO for _ in range(n)) for _ in range(n))
    return ParabolicOperator(g.chart, tuple(tuple(r) for r in inv), zero, tuple(b1), ZERO, pe_prime=True)


def inner(g: MetricField, v: VectorField, w: VectorField) -> Expr:
    """Pointwise g_ij v^i w^j as an expression."""
    if v.chart != g.chart or w.chart != g.chart:
        raise ValueError("vector fields and metric live on different charts")
    total: Expr = ZERO
    for i in range(g.dim):
        for j in range(g.dim):
            total = total + g.g[i][j] * v.components[i] * w.components[j]
    return total


def theta_field(g: MetricField, eta: VectorField) -> Expr:
    """Squared length <eta, eta> of an isometry generator."""
    return inner(g, eta, eta)
