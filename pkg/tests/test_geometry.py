import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st

from parafactor.corpus import fixture_names, load
from parafactor.expr import DomainError, parse
from parafactor.geometry import (Chart, MetricError, MetricField, VectorField, euclidean, inner,
                                 laplace_beltrami, laplace_beltrami_numeric, metric_inverse, theta_field)
from parafactor.operators import apply, invariance_check

EX2 = [["1 + z^2", "z", "-z"], ["z", "2", "-1"], ["-z", "-1", "1"]]
EX3 = [["1 + exp(z)^2 + (2*y)^2", "-exp(z)", "2*y"], ["-exp(z)", "1", "0"], ["2*y", "0", "1"]]
EX3_PRINTED = [["exp(z)^2 + (2*y)^2", "-exp(z)", "2*y"], ["-exp(z)", "1", "0"], ["2*y", "0", "1"]]


def box3(lo=-1.0, hi=1.0):
    return Chart.box(["x", "y", "z"], [(lo, hi)] * 3)


def test_chart_sampling_is_deterministic_and_inside():
    c = Chart.box(["x", "y"], [(-1, 1), (0, 2, True)], excluded=[(0.0, 1.0)])
    a, b = c.sample(200, seed=5), c.sample(200, seed=5)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (200, 2)
    assert np.all(c.contains(a))
    assert not np.any(c.near_excluded(a))
    assert not np.array_equal(a, c.sample(200, seed=6))


def test_chart_rejects_bad_boxes():
    with pytest.raises(ValueError):
        Chart.box(["x"], [(1, 1)])
    with pytest.raises(ValueError):
        Chart.box(["x", "x"], [(0, 1), (0, 1)])


def test_euclidean_inverse_is_identity():
    inv = metric_inverse(euclidean(box3()))
    pts = box3().sample(10, seed=1)
    np.testing.assert_array_equal(inv(box3().bindings(pts)), np.broadcast_to(np.eye(3), (10, 3, 3)))


def test_example2_inverse_at_z0():
    g = MetricField(box3(), EX2)
    got = metric_inverse(g)({"x": 0.3, "y": 0.1, "z": 0.0})
    np.testing.assert_allclose(got, [[1, 0, 0], [0, 1, 1], [0, 1, 2]], atol=1e-14)


def test_corrected_example3_inverse_matches_lu_oracle():
    g = MetricField(box3(), EX3)
    b = {"x": 0.2, "y": 0.0, "z": 0.0}
    mat = g.evaluate(b)
    np.testing.assert_allclose(mat, [[2, -1, 0], [-1, 1, 0], [0, 0, 1]])
    oracle = scipy.linalg.lu_solve(scipy.linalg.lu_factor(mat), np.eye(3))
    got = metric_inverse(g)(b)
    np.testing.assert_allclose(got, oracle, atol=1e-14)
    np.testing.assert_allclose(got, [[1, 1, 0], [1, 2, 0], [0, 0, 1]], atol=1e-14)


def test_printed_example3_metric_is_singular_and_named():
    g = MetricField(box3(), EX3_PRINTED)
    with pytest.raises(DomainError, match=r"singular metric at \(0.2, 0.0, 0.0\)"):
        metric_inverse(g)({"x": 0.2, "y": 0.0, "z": 0.0})
    with pytest.raises(MetricError):
        g.check(box3().sample(50, seed=0))


@pytest.mark.parametrize("entries", [EX2, EX3])
def test_inverse_is_symmetric_and_accurate(entries):
    g = MetricField(box3(), entries)
    b = box3().bindings(box3().sample(200, seed=3))
    inv = metric_inverse(g)(b)
    assert np.max(np.abs(inv - np.swapaxes(inv, -1, -2))) < 1e-12
    assert np.max(np.abs(g.evaluate(b) @ inv - np.eye(3))) < 1e-10


def test_asymmetric_metric_is_reported():
    g = MetricField(box3(), [["1", "z", "0"], ["0", "1", "0"], ["0", "0", "1"]])
    bad = g.symmetry_defects(box3().sample(100, seed=0))
    assert bad and bad[0][:2] == ("x", "y")


def test_euclidean_laplacian_examples():
    c = Chart.box(["x", "y"], [(-1, 1)] * 2)
    L = laplace_beltrami(euclidean(c))
    pts = c.sample(50, seed=2)
    np.testing.assert_array_equal(apply(L, "x^2 + y^2", pts), 4.0)
    np.testing.assert_array_equal(apply(L, "x", pts), 0.0)
    L3 = laplace_beltrami(euclidean(box3()))
    np.testing.assert_array_equal(apply(L3, "x^2 + y^2 + z^2", box3().sample(50, seed=2)), 6.0)


def test_example2_laplacian_of_x_is_one():
    L = laplace_beltrami(MetricField(box3(), EX2))
    np.testing.assert_allclose(apply(L, "x", box3().sample(200, seed=4)), 1.0, atol=1e-13)


def test_conformal_metric_laplacian():
    c = Chart.box(["x", "y"], [(-1, 1)] * 2)
    lam = "(2 + x*y + sin(x))"
    L = laplace_beltrami(MetricField(c, [[f"{lam}^2", "0"], ["0", f"{lam}^2"]]))
    pts = c.sample(100, seed=0)
    f = "exp(x)*cos(y) + x^3*y"
    flat = apply(laplace_beltrami(euclidean(c)), f, pts)
    lam_v = 2 + pts[:, 0] * pts[:, 1] + np.sin(pts[:, 0])
    np.testing.assert_allclose(apply(L, f, pts), flat / lam_v ** 2, rtol=1e-12, atol=1e-12)


def test_polar_laplacian_coefficients():
    c = Chart.box(["r", "f"], [(0.5, 2), (-3, 3)])
    L = laplace_beltrami(MetricField(c, [["1", "0"], ["0", "r^2"]]))
    pts = c.sample(50, seed=1)
    co = L.coefficients(c.bindings(pts))
    r = pts[:, 0]
    np.testing.assert_allclose(co.b1[:, 0], 1 / r, rtol=1e-14)
    np.testing.assert_allclose(co.b2[:, 1, 1], 1 / r ** 2, rtol=1e-14)


@pytest.mark.parametrize("name", [n for n in fixture_names()])
def test_constants_are_harmonic_for_every_corpus_metric(name):
    fx = load(name)
    if fx.metric is None:
        pytest.skip("fixture declares no metric")
    L = laplace_beltrami(fx.metric)
    pts = fx.chart.sample(200, seed=42)
    assert np.max(np.abs(apply(L, "3.5", pts))) < 1e-9


@pytest.mark.parametrize("entries", [EX2, EX3])
def test_symbolic_and_numeric_routes_agree(entries):
    g = MetricField(box3(), entries)
    sym, num = laplace_beltrami(g), laplace_beltrami_numeric(g)
    b = box3().bindings(box3().sample(100, seed=9))
    cs, cn = sym.coefficients(b), num.coefficients(b)
    np.testing.assert_allclose(cn.b2, cs.b2, atol=1e-12)
    np.testing.assert_allclose(cn.b1, cs.b1, atol=1e-10)


def test_four_dimensional_route_matches_printed_operator():
    fx = load("example1")
    pts = fx.chart.sample(200, seed=1)
    f = "x^2 + y^2"
    np.testing.assert_allclose(apply(fx.operator, f, pts), 4.0, atol=1e-12)
    assert apply(fx.operator, f, (0.3, 0.2, 0.1, -0.4)) == pytest.approx(4.0, abs=1e-12)


def test_rotation_invariance_of_euclidean_laplacian():
    L = laplace_beltrami(euclidean(box3()))
    c, s = float(np.cos(0.7)), float(np.sin(0.7))
    R = [f"{c!r}*x - {s!r}*y", f"{s!r}*x + {c!r}*y", "z"]
    rep = invariance_check(L, [parse(e) for e in R], threshold=1e-9)
    assert rep.passed, rep


def test_inner_products():
    c = Chart.box(["x", "y"], [(-1, 1)] * 2)
    g = euclidean(c)
    pts = c.sample(20, seed=0)
    b = c.bindings(pts)
    dx = VectorField(c, ("1", "0"))
    rot = VectorField(c, ("-y", "x"))
    assert np.all(inner(g, dx, dx).evaluate(b) == 1.0)
    np.testing.assert_allclose(theta_field(g, rot).evaluate(b), pts[:, 0] ** 2 + pts[:, 1] ** 2)
    g3 = MetricField(box3(), EX3_PRINTED)
    pts3 = box3().sample(20, seed=0)
    theta = theta_field(g3, VectorField(box3(), ("1", "0", "0"))).evaluate(box3().bindings(pts3))
    np.testing.assert_allclose(theta, np.exp(2 * pts3[:, 2]) + 4 * pts3[:, 1] ** 2)


spd = st.lists(st.floats(-1, 1, allow_nan=False), min_size=9, max_size=9).map(
    lambda v: np.array(v).reshape(3, 3) @ np.array(v).reshape(3, 3).T + 0.5 * np.eye(3))


@given(spd, st.lists(st.floats(-2, 2, allow_nan=False), min_size=6, max_size=6))
def test_constant_metric_laplacian_of_quadratic_is_trace(G, coef):
    g = MetricField(box3(), [[repr(float(G[i, j])) for j in range(3)] for i in range(3)])
    a, b, c, d, e, f = coef
    H = np.array([[2 * a, d, e], [d, 2 * b, f], [e, f, 2 * c]])
    poly = f"{a!r}*x^2 + {b!r}*y^2 + {c!r}*z^2 + {d!r}*x*y + {e!r}*x*z + {f!r}*y*z + x - 2*z"
    val = apply(laplace_beltrami(g), poly, (0.1, -0.2, 0.3))
    assert val == pytest.approx(float(np.trace(np.linalg.inv(G) @ H)), rel=1e-9, abs=1e-9)
