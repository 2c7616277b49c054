"""Explicit finite-difference solver for u_t = L u on chart grids.

Space derivatives use second-order central differences (the four-point cross
stencil for mixed derivatives); time stepping is forward Euler with a
CFL-type step limit.  :func:`residual` measures how well a sampled series
satisfies an operator, which is how lifted solutions are validated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .expr import ZERO, Const, Expr, as_expr, evaluate
from .geometry import Chart
from .operators import OperatorCoefficients, ParabolicOperator, apply_jets

log = logging.getLogger(__name__)

__all__ = [
    "BoundaryCondition", "Grid", "GridField", "BlowUpError", "SolverError",
    "grid_apply", "step", "solve", "residual", "ResidualReport", "stable_dt",
    "convergence_order", "write_csv", "read_csv", "apply_grid_at",
]

CFL_FACTOR = 0.2


class SolverError(RuntimeError):
    pass


class BlowUpError(SolverError):
    def __init__(self, step_index: int):
        self.step_index = step_index
        super().__init__(f"non-finite values after step {step_index}")


@dataclass(frozen=True)
class BoundaryCondition:
    kind: str = "dirichlet"  # periodic | dirichlet | neumann
    value: Expr = ZERO

    def __post_init__(self):
        if self.kind not in ("periodic", "dirichlet", "neumann"):
            raise ValueError(f"unknown boundary condition {self.kind!r}")
        object.__setattr__(self, "value", as_expr(self.value))


@dataclass(frozen=True)
class Grid:
    """Rectangular node grid over a chart.

    Periodic axes carry ``N`` nodes at spacing period/N; other axes carry
    ``N`` nodes including both end points.
    """

    chart: Chart
    nodes: tuple[int, ...]
    bcs: tuple[BoundaryCondition, ...] = ()

    def __post_init__(self):
        nodes = tuple(int(n) for n in self.nodes)
        if len(nodes) != self.chart.dim:
            raise ValueError("one node count per chart axis required")
        bcs = tuple(self.bcs) or tuple(
            BoundaryCondition("periodic") if iv.periodic else BoundaryCondition("dirichlet")
            for iv in self.chart.intervals)
        if len(bcs) != self.chart.dim:
            raise ValueError("one boundary condition per axis required")
        for iv, bc, n in zip(self.chart.intervals, bcs, nodes):
            if (bc.kind == "periodic") != iv.periodic:
                raise ValueError("periodic boundary conditions must match chart periodicity")
            if n < 3:
                raise ValueError("need at least 3 nodes per axis")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "bcs", bcs)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes

    @property
    def dim(self) -> int:
        return self.chart.dim

    @property
    def spacing(self) -> tuple[float, ...]:
        out = []
        for iv, n in zip(self.chart.intervals, self.nodes):
            out.append(iv.length / n if iv.periodic else iv.length / (n - 1))
        return tuple(out)

    @property
    def axes(self) -> list[np.ndarray]:
        return [iv.lo + np.arange(n) * h for iv, n, h in zip(self.chart.intervals, self.nodes, self.spacing)]

    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    def bindings(self, **extra) -> dict:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        out = dict(zip(self.chart.coords, mesh))
        out.update(extra)
        return out

    def interior(self, margin: int = 1) -> tuple[slice, ...]:
        """Slices selecting nodes at least ``margin`` away from non-periodic edges."""
        return tuple(slice(None) if bc.kind == "periodic" else slice(margin, n - margin)
                     for bc, n in zip(self.bcs, self.nodes))

    def sample(self, expr, t: float = 0.0) -> np.ndarray:
        value = evaluate(as_expr(expr), self.bindings(t=t))
        return np.broadcast_to(np.asarray(value, dtype=float), self.shape).copy()

    def refined(self, factor: int = 2) -> "Grid":
        nodes = tuple(n * factor if bc.kind == "periodic" else (n - 1) * factor + 1
                      for n, bc in zip(self.nodes, self.bcs))
        return Grid(self.chart, nodes, self.bcs)


@dataclass
class GridField:
    """Snapshots of a scalar field on a grid: ``values[k]`` is taken at ``times[k]``."""

    grid: Grid
    times: tuple[float, ...]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape == self.grid.shape and len(self.times) == 1:
            self.values = self.values[None]
        self.times = tuple(float(t) for t in self.times)
        if self.values.shape != (len(self.times),) + self.grid.shape:
            raise ValueError(f"values of shape {self.values.shape} do not match "
                             f"{len(self.times)} snapshots on grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("GridField values must be finite")

    def __len__(self):
        return len(self.times)

    def snapshot(self, index: int = -1) -> "GridField":
        return GridField(self.grid, (self.times[index],), self.values[index][None])

    def interpolate(self, points: np.ndarray, index: int = -1) -> np.ndarray:
        """Values at arbitrary points (cubic, periodic axes wrapped).

        Points that coincide with grid nodes are read off exactly.
        """
        points = np.asarray(points, dtype=float)
        grid = self.grid
        pts = grid.chart.wrap(points)
        data = self.values[index]
        lo = grid.chart.lower
        h = np.array(grid.spacing)
        for k, (bc, n) in enumerate(zip(grid.bcs, grid.nodes)):
            if bc.kind != "periodic":
                c = pts[..., k]
                if np.any(c < lo[k] - 1e-9 * h[k]) or np.any(c > lo[k] + (n - 1) * h[k] + 1e-9 * h[k]):
                    raise SolverError(f"points outside the grid along axis {grid.chart.coords[k]}")
        idx = (pts - lo) / h
        nearest = np.rint(idx)
        if np.all(np.abs(idx - nearest) < 1e-9):
            ii = nearest.astype(int)
            for k, n in enumerate(grid.nodes):
                ii[..., k] = np.mod(ii[..., k], n) if grid.bcs[k].kind == "periodic" else np.clip(ii[..., k], 0, n - 1)
            return data[tuple(ii[..., k] for k in range(grid.dim))]
        axes, pad = [], []
        for ax, bc, hk in zip(grid.axes, grid.bcs, h):
            if bc.kind == "periodic":
                ext = np.concatenate([ax[0] - hk * np.arange(3, 0, -1), ax, ax[-1] + hk * np.arange(1, 4)])
                axes.append(ext)
                pad.append((3, 3))
            else:
                axes.append(ax)
                pad.append((0, 0))
        padded = data
        for k, (bc, pw) in enumerate(zip(grid.bcs, pad)):
            if pw != (0, 0):
                width = [(0, 0)] * grid.dim
                width[k] = pw
                padded = np.pad(padded, width, mode="wrap")
        method = "cubic" if all(len(a) >= 4 for a in axes) else "linear"
        interp = RegularGridInterpolator(axes, padded, method=method)
        flat = pts.reshape(-1, grid.dim)
        return interp(flat).reshape(points.shape[:-1])


# ---------------------------------------------------------------------------
# discrete operator
# ---------------------------------------------------------------------------

def _pad(u: np.ndarray, grid: Grid) -> np.ndarray:
    mode = {"periodic": "wrap", "neumann": "reflect", "dirichlet": "edge"}
    out = u
    for k, bc in enumerate(grid.bcs):
        width = [(0, 0)] * u.ndim
        width[k] = (1, 1)
        out = np.pad(out, width, mode=mode[bc.kind])
    return out


def _shift(p: np.ndarray, offsets: dict) -> np.ndarray:
    idx = []
    for k in range(p.ndim):
        o = offsets.get(k, 0)
        idx.append(slice(1 + o, p.shape[k] - 1 + o))
    return p[tuple(idx)]


def grid_jets(u: np.ndarray, grid: Grid, mixed=None) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference gradient and Hessian at every node."""
    n = grid.dim
    h = grid.spacing
    p = _pad(u, grid)
    c = _shift(p, {})
    grad = np.empty(u.shape + (n,))
    hess = np.zeros(u.shape + (n, n))
    for i in range(n):
        up, dn = _shift(p, {i: 1}), _shift(p, {i: -1})
        grad[..., i] = (up - dn) / (2 * h[i])
        hess[..., i, i] = (up - 2 * c + dn) / h[i] ** 2
        for j in range(i + 1, n):
            if mixed is not None and not mixed[i][j]:
                continue
            d = (_shift(p, {i: 1, j: 1}) - _shift(p, {i: 1, j: -1})
                 - _shift(p, {i: -1, j: 1}) + _shift(p, {i: -1, j: -1})) / (4 * h[i] * h[j])
            hess[..., i, j] = hess[..., j, i] = d
    return grad, hess


class _GridOperator:
    """Caches node coefficients of an operator that does not depend on u or t."""

    def __init__(self, L: ParabolicOperator, grid: Grid):
        if L.chart.coords != grid.chart.coords:
            raise SolverError("operator and grid live on different charts")
        self.L = L
        self.grid = grid
        self.nodes = grid.bindings()
        self.varying = L.depends_on("u") or L.depends_on("t")
        n = L.dim
        self.mixed = [[not (L.b2[i][j] == ZERO and L.b2[j][i] == ZERO) for j in range(n)] for i in range(n)]
        self._cached = None if self.varying else L.coefficients(dict(self.nodes, u=0.0, t=0.0))

    def coefficients(self, u: np.ndarray, t: float) -> OperatorCoefficients:
        if self._cached is not None:
            return self._cached
        return self.L.coefficients(dict(self.nodes, u=u, t=t))

    def __call__(self, u: np.ndarray, t: float) -> np.ndarray:
        grad, hess = grid_jets(u, self.grid, self.mixed)
        return apply_jets(self.coefficients(u, t), grad, hess)

    def stable_dt(self, u: np.ndarray, t: float) -> float:
        co = self.coefficients(u, t)
        bound = float(np.max(np.sum(np.abs(co.b2), axis=-1), initial=0.0))
        hmin = min(self.grid.spacing)
        if bound <= 0:
            return math.inf
        return CFL_FACTOR * hmin ** 2 / bound


def grid_apply(L: ParabolicOperator, grid: Grid, u: np.ndarray, t: float = 0.0) -> np.ndarray:
    """L_h u at every node (values at Dirichlet boundary nodes are meaningless)."""
    return _GridOperator(L, grid)(np.asarray(u, dtype=float), t)


def stable_dt(L: ParabolicOperator, grid: Grid, u: np.ndarray, t: float = 0.0) -> float:
    """Largest explicit step allowed: 0.2 h_min^2 / max row-sum of |b2|."""
    return _GridOperator(L, grid).stable_dt(np.asarray(u, dtype=float), t)


def apply_grid_at(L: ParabolicOperator, f: GridField, point, u_value=None, t: float | None = None):
    grid = f.grid
    u = f.values[-1]
    t = f.times[-1] if t is None else t
    op = _GridOperator(L, grid)
    if u_value is not None and op.varying:
        co = L.coefficients(dict(op.nodes, u=np.full(grid.shape, float(u_value)), t=t))
        grad, hess = grid_jets(u, grid)
        lu = apply_jets(co, grad, hess)
    else:
        lu = op(u, t)
    pts = np.atleast_2d(np.asarray(point, dtype=float))
    idx = (grid.chart.wrap(pts) - grid.chart.lower) / np.array(grid.spacing)
    nearest = np.rint(idx).astype(int)
    if np.any(np.abs(idx - nearest) > 1e-6):
        raise SolverError("grid evaluation requires points on grid nodes")
    for k, (bc, n) in enumerate(zip(grid.bcs, grid.nodes)):
        if bc.kind == "periodic":
            nearest[:, k] %= n
        elif np.any(nearest[:, k] < 1) or np.any(nearest[:, k] > n - 2):
            raise SolverError("point is on the grid boundary")
    out = lu[tuple(nearest[:, k] for k in range(grid.dim))]
    return float(out[0]) if np.ndim(point) == 1 else out


def _apply_bcs(u: np.ndarray, grid: Grid, t: float, cache: dict) -> None:
    for k, bc in enumerate(grid.bcs):
        if bc.kind != "dirichlet":
            continue
        key = (k, t) if bc.value.free_variables & {"t"} else (k, None)
        if key not in cache:
            b = grid.bindings(t=t)
            cache[key] = np.broadcast_to(np.asarray(evaluate(bc.value, b), dtype=float), grid.shape)
        val = cache[key]
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[k], hi[k] = 0, -1
        u[tuple(lo)] = val[tuple(lo)]
        u[tuple(hi)] = val[tuple(hi)]


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

def step(L: ParabolicOperator, f: GridField, dt: float, _op: _GridOperator | None = None,
         _bc_cache: dict | None = None, _index: int = 0) -> GridField:
    """One forward-Euler step; ``dt`` is clamped to the stability bound."""
    op = _op or _GridOperator(L, f.grid)
    u = f.values[-1]
    t = f.times[-1]
    limit = op.stable_dt(u, t)
    if dt > limit:
        log.info("time step %.3g clamped to stability bound %.3g", dt, limit)
        dt = limit
    new = _euler(op, u, t, dt, _bc_cache if _bc_cache is not None else {}, _index)
    return GridField(f.grid, (t + dt,), new[None])


def _euler(op: _GridOperator, u: np.ndarray, t: float, dt: float, bc_cache: dict, index: int) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        new = u + dt * op(u, t)
    _apply_bcs(new, op.grid, t + dt, bc_cache)
    if not np.all(np.isfinite(new)):
        raise BlowUpError(index)
    return new


def solve(L: ParabolicOperator, grid: Grid, ic, T: float, snapshots: int = 16,
          dt: float | None = None) -> GridField:
    """March u_t = L u from ``ic`` to time ``T``.

    ``ic`` is an expression (sampled on the grid) or a GridField whose last
    snapshot is the initial state.  Snapshots are stored at ``snapshots``
    evenly spaced times including 0 and T; between them uniform steps no
    larger than ``dt`` (or the stability bound) are taken.
    """
    if T < 0:
        raise ValueError("final time must be non-negative")
    op = _GridOperator(L, grid)
    if isinstance(ic, GridField):
        u = ic.values[-1].copy()
        t0 = ic.times[-1]
    else:
        u = grid.sample(ic, 0.0)
        t0 = 0.0
    bc_cache: dict = {}
    _apply_bcs(u, grid, t0, bc_cache)
    if T == 0:
        return GridField(grid, (t0,), u[None])
    if snapshots < 2:
        raise ValueError("need at least two snapshots for T > 0")
    marks = t0 + np.linspace(0.0, T, snapshots)
    out = [u.copy()]
    t = t0
    count = 0
    for target in marks[1:]:
        span = target - t
        limit = op.stable_dt(u, t)
        h = limit if dt is None else min(dt, limit)
        if dt is not None and dt > limit:
            log.info("time step %.3g clamped to stability bound %.3g", dt, limit)
        nsteps = max(1, math.ceil(span / h * (1 - 1e-12)))
        tau = span / nsteps
        for _ in range(nsteps):
            if op.varying and tau > op.stable_dt(u, t) * (1 + 1e-9):
                raise SolverError("stability bound shrank below the chosen step; reduce dt")
            u = _euler(op, u, t, tau, bc_cache, count)
            t += tau
            count += 1
        t = float(target)
        out.append(u.copy())
    return GridField(grid, tuple(float(m) for m in marks), np.stack(out))


# ---------------------------------------------------------------------------
# residual harness
# ---------------------------------------------------------------------------

@dataclass
class ResidualReport:
    max_norm: float
    l2_norm: float
    per_snapshot: list
    spacing: tuple
    time_spacing: float
    interior_nodes: int

    def __str__(self):
        return (f"residual max {self.max_norm:.3e}, rms {self.l2_norm:.3e} "
                f"(h = {', '.join(f'{h:.4g}' for h in self.spacing)}, dt = {self.time_spacing:.3g})")


def residual(L: ParabolicOperator, u: GridField, margin: int = 1) -> ResidualReport:
    """R = u_t - L u on interior nodes of every inner snapshot.

    u_t is the central difference of neighbouring snapshots, L u uses the
    central-difference stencils.  ``margin`` nodes next to non-periodic edges
    are skipped.
    """
    if len(u) < 3:
        raise SolverError("residual needs at least three snapshots")
    op = _GridOperator(L, u.grid)
    sl = u.grid.interior(margin)
    rows = []
    worst, sq, count = 0.0, 0.0, 0
    times = np.asarray(u.times)
    for k in range(1, len(u) - 1):
        ut = (u.values[k + 1] - u.values[k - 1]) / (times[k + 1] - times[k - 1])
        r = (ut - op(u.values[k], times[k]))[sl]
        m = float(np.max(np.abs(r)))
        rows.append((float(times[k]), m, float(np.sqrt(np.mean(r ** 2)))))
        worst = max(worst, m)
        sq += float(np.sum(r ** 2))
        count += r.size
    return ResidualReport(worst, math.sqrt(sq / count), rows, u.grid.spacing,
                          float(np.max(np.diff(times))), r.size)


def convergence_order(spacings: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(h)."""
    h = np.log(np.asarray(spacings, dtype=float))
    e = np.log(np.asarray(errors, dtype=float))
    return float(np.polyfit(h, e, 1)[0])


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def write_csv(f: GridField, directory, stem: str = "field") -> list[Path]:
    """One CSV file per snapshot.

    Layout: ``#``-prefixed header lines (format tag, axes, nodes, lower,
    upper, periodic flags, time) followed by the values in row-major order,
    one line per index of all but the last axis.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    g = f.grid
    paths = []
    for k, t in enumerate(f.times):
        path = directory / f"{stem}_{k:03d}.csv"
        lines = [
            "# parafactor-gridfield 1",
            "# axes: " + ",".join(g.chart.coords),
            "# nodes: " + ",".join(str(n) for n in g.nodes),
            "# lower: " + ",".join(repr(iv.lo) for iv in g.chart.intervals),
            "# upper: " + ",".join(repr(iv.hi) for iv in g.chart.intervals),
            "# periodic: " + ",".join("1" if iv.periodic else "0" for iv in g.chart.intervals),
            f"# t: {t!r}",
        ]
        rows = f.values[k].reshape(-1, g.nodes[-1])
        lines += [",".join(repr(float(v)) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n")
        paths.append(path)
    return paths


def read_csv(path) -> GridField:
    header = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            header[key.strip()] = val.strip()
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
    coords = header["axes"].split(",")
    nodes = tuple(int(n) for n in header["nodes"].split(","))
    lower = [float(v) for v in header["lower"].split(",")]
    upper = [float(v) for v in header["upper"].split(",")]
    periodic = [v == "1" for v in header["periodic"].split(",")]
    chart = Chart.box(coords, list(zip(lower, upper, periodic)))
    grid = Grid(chart, nodes)
    values = np.asarray(rows).reshape(nodes)
    return GridField(grid, (float(header["t"]),), values[None])
