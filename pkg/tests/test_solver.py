import math

import numpy as np
import pytest

from parafactor.geometry import Chart, MetricField, euclidean
from parafactor.operators import ParabolicOperator, heat_operator
from parafactor.solver import (BlowUpError, BoundaryCondition, Grid, GridField, SolverError, convergence_order,
                               read_csv, residual, solve, stable_dt, step, write_csv)

TWO_PI = 2 * math.pi
RING = Chart.box(["x"], [(0, 1, True)])
SEGMENT = Chart.box(["x"], [(0, 1)])
TORUS = Chart.box(["x", "y"], [(0, 1, True), (0, 1, True)])


def test_fourier_mode_decay():
    L = heat_operator(euclidean(RING))
    grid = Grid(RING, (128,))
    T = 0.01
    u = solve(L, grid, f"sin({TWO_PI!r}*x)", T, snapshots=2, dt=1e-6)
    exact = np.exp(-TWO_PI ** 2 * T) * np.sin(TWO_PI * grid.axes[0])
    assert np.max(np.abs(u.values[-1] - exact)) < 0.01 * np.exp(-TWO_PI ** 2 * T)


def test_constant_stays_constant():
    L = heat_operator(MetricField(TORUS, [["1 + 0.5*sin(6*x)", "0.1"], ["0.1", "2"]]))
    u = solve(L, Grid(TORUS, (16, 16)), "2.5", 0.05, snapshots=4)
    np.testing.assert_allclose(u.values, 2.5, atol=1e-13)


def test_mass_conservation_with_constant_coefficients():
    L = heat_operator(MetricField(TORUS, [["1", "0.3"], ["0.3", "0.5"]]))
    grid = Grid(TORUS, (32, 32))
    u = solve(L, grid, "exp(sin(6.283185307179586*x))*cos(6.283185307179586*y) + 1", 0.02, snapshots=5)
    mass = u.values.reshape(len(u), -1).sum(axis=1)
    np.testing.assert_allclose(mass, mass[0], rtol=1e-12)


def test_maximum_principle_linear():
    L = heat_operator(euclidean(SEGMENT))
    grid = Grid(SEGMENT, (41,))
    u = solve(L, grid, "sin(9*x) + x", 0.05, snapshots=6)
    assert u.values.max() <= u.values[0].max() + 1e-12
    assert u.values.min() >= u.values[0].min() - 1e-12


def test_porous_medium_maximum_principle():
    grid = Grid(SEGMENT, (41,), (BoundaryCondition("dirichlet", "1"),))
    L = heat_operator(euclidean(SEGMENT), a="u")
    u = solve(L, grid, "1 + 0.5*sin(3.141592653589793*x)", 0.1, snapshots=6)
    assert u.values.max() <= 1.5 + 1e-12
    assert u.values.min() >= 1.0 - 1e-12


def test_harmonic_polynomial_has_zero_residual():
    chart = Chart.box(["x", "y"], [(-1, 1), (-1, 1)])
    L = heat_operator(euclidean(chart))
    grid = Grid(chart, (21, 21), (BoundaryCondition("dirichlet", "x^2 - y^2 + 3*x*y"),) * 2)
    u = solve(L, grid, "x^2 - y^2 + 3*x*y", 0.01, snapshots=5)
    assert residual(L, u).max_norm < 1e-8


def test_blow_up_is_reported():
    L = heat_operator(euclidean(SEGMENT), q="u^2")
    grid = Grid(SEGMENT, (11,), (BoundaryCondition("dirichlet", "100"),))
    with pytest.raises(BlowUpError) as info:
        solve(L, grid, "100", 10.0, snapshots=2)
    assert info.value.step_index >= 0


def test_step_clamps_to_stability_bound():
    L = heat_operator(euclidean(RING))
    grid = Grid(RING, (50,))
    f = GridField(grid, (0.0,), grid.sample("sin(6.283185307179586*x)")[None])
    bound = stable_dt(L, grid, f.values[-1])
    nxt = step(L, f, 1.0)
    assert nxt.times[0] == pytest.approx(bound)
    assert bound == pytest.approx(0.2 * grid.spacing[0] ** 2, rel=1e-12)


def test_zero_final_time_returns_initial_state():
    L = heat_operator(euclidean(RING))
    grid = Grid(RING, (8,))
    u = solve(L, grid, "x", 0.0)
    assert len(u) == 1
    np.testing.assert_array_equal(u.values[0], grid.axes[0])


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        solve(heat_operator(euclidean(RING)), Grid(RING, (8,)), "x", -1.0)


def test_csv_round_trip(tmp_path):
    grid = Grid(TORUS, (5, 7))
    vals = np.random.default_rng(0).normal(size=(2, 5, 7))
    f = GridField(grid, (0.0, 0.3), vals)
    paths = write_csv(f, tmp_path, "u")
    assert [p.name for p in paths] == ["u_000.csv", "u_001.csv"]
    back = read_csv(paths[1])
    assert back.times == (0.3,)
    assert back.grid.nodes == grid.nodes
    np.testing.assert_array_equal(back.values[0], vals[1])


def test_interpolation_is_exact_at_nodes_and_smooth_between():
    grid = Grid(TORUS, (32, 32))
    f = GridField(grid, (0.0,), grid.sample("sin(6.283185307179586*x)*cos(6.283185307179586*y)")[None])
    nodes = grid.points().reshape(-1, 2)
    np.testing.assert_array_equal(f.interpolate(nodes), f.values[0].reshape(-1))
    pts = np.array([[0.013, 0.77], [0.5, 0.123], [0.99, 0.999]])
    exact = np.sin(TWO_PI * pts[:, 0]) * np.cos(TWO_PI * pts[:, 1])
    np.testing.assert_allclose(f.interpolate(pts), exact, atol=1e-3)


def test_interpolation_outside_grid_rejected():
    grid = Grid(SEGMENT, (5,))
    f = GridField(grid, (0.0,), np.zeros((1, 5)))
    with pytest.raises(SolverError):
        f.interpolate(np.array([[1.5]]))


def test_convergence_order_of_synthetic_data():
    h = np.array([0.1, 0.05, 0.025])
    assert convergence_order(h, 3 * h ** 2) == pytest.approx(2.0)
    assert convergence_order(h, 0.5 * h) == pytest.approx(1.0)


def test_nan_values_rejected():
    with pytest.raises(ValueError):
        GridField(Grid(RING, (4,)), (0.0,), np.array([[0, np.nan, 0, 0]]))


def test_residual_needs_three_snapshots():
    L = heat_operator(euclidean(RING))
    u = solve(L, Grid(RING, (8,)), "x", 0.01, snapshots=2)
    with pytest.raises(SolverError):
        residual(L, u)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(SEGMENT, (2,))
    with pytest.raises(ValueError):
        Grid(RING, (8,), (BoundaryCondition("dirichlet"),))
    with pytest.raises(ValueError):
        BoundaryCondition("robin")


def test_refined_grid_keeps_endpoints():
    grid = Grid(Chart.box(["x", "y"], [(0, 2, True), (-1, 1)]), (32, 33))
    fine = grid.refined()
    assert fine.nodes == (64, 65)
    assert fine.spacing[0] == pytest.approx(grid.spacing[0] / 2)
    assert fine.axes[1][-1] == pytest.approx(1.0)


def test_residual_of_exact_heat_solution_is_second_order():
    L = heat_operator(euclidean(RING))
    res = []
    hs = []
    for n in (16, 32, 64):
        grid = Grid(RING, (n,))
        times = (0.0, 1e-4, 2e-4)
        vals = np.stack([np.exp(-TWO_PI ** 2 * t) * np.sin(TWO_PI * grid.axes[0]) for t in times])
        res.append(residual(L, GridField(grid, times, vals)).max_norm)
        hs.append(grid.spacing[0])
    assert convergence_order(hs, res) == pytest.approx(2.0, abs=0.1)


def test_zero_operator_leaves_state_unchanged():
    L = ParabolicOperator.zero(RING)
    u = solve(L, Grid(RING, (8,)), "x^2", 0.1, snapshots=3, dt=0.05)
    np.testing.assert_array_equal(u.values[0], u.values[-1])
