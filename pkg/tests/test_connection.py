import math

import numpy as np
import pytest

from parafactor.checks import liftcheck_checks
from parafactor.connection import (ConnectionError, DecompositionError, GroupFibering, Loop, OneForm,
                                   connection_form, curvature, ddchi_defect, decompose,
                                   exterior_derivative_numeric, killing_defect, lift_check)
from parafactor.corpus import fixture_names, load
from parafactor.geometry import Chart, MetricField, VectorField, euclidean
from parafactor.projectibility import SmoothMap


def fibering_of(fx):
    spec = fx.connection
    return GroupFibering(fx.metric, VectorField(fx.chart, spec.eta), spec.base,
                         SmoothMap(fx.chart, spec.base, spec.projection), spec.section,
                         spec.topology, spec.fiber_range, spec.param)


def heisenberg(period):
    chart = Chart.box(["x", "y", "z"], [(-1, 1), (0, 1, True), (0, period, True)])
    base = Chart.box(["x", "y"], [(-1, 1), (0, 1, True)])
    g = MetricField(chart, [["1", "0", "0"], ["0", "1 + x^2", "x"], ["0", "x", "1"]])
    return GroupFibering(g, VectorField(chart, ("0", "0", "1")), base, SmoothMap(chart, base, ("x", "y")),
                         ("x", "y", "s"), "circle", (0.0, period))


def test_translation_fibering_gives_dy():
    chart = Chart.box(["x", "y"], [(-1, 1), (-1, 1)])
    base = Chart.box(["x"], [(-1, 1)])
    gf = GroupFibering(euclidean(chart), VectorField(chart, ("0", "1")), base, SmoothMap(chart, base, ("x",)),
                       ("x", "s"))
    gf.check()
    chi = connection_form(gf)
    pts = chart.sample(20, seed=0)
    np.testing.assert_array_equal(chi.evaluate(pts), np.tile([0.0, 1.0], (20, 1)))


def test_rotation_gives_angular_form():
    chart = Chart.box(["x", "y"], [(0.5, 2), (-1, 1)])
    gf_eta = VectorField(chart, ("-y", "x"))
    chi = connection_form(GroupFibering(euclidean(chart), gf_eta, Chart.box(["r"], [(0.5, 2)]),
                                        SmoothMap(chart, Chart.box(["r"], [(0.5, 2)]), ("sqrt(x^2 + y^2)",)),
                                        ("r*cos(s)", "r*sin(s)"), "circle", (0.0, 2 * math.pi)))
    pts = chart.sample(50, seed=1)
    r2 = np.sum(pts ** 2, axis=1)
    np.testing.assert_allclose(chi.evaluate(pts), np.stack([-pts[:, 1] / r2, pts[:, 0] / r2], axis=1))


def test_screw_motion_is_normalized():
    chart = Chart.box(["r", "f", "z"], [(0.5, 2), (-3, 3), (-1, 1)])
    g = MetricField(chart, [["1", "0", "0"], ["0", "r^2", "0"], ["0", "0", "1"]])
    eta = VectorField(chart, ("0", "0.7", "1"))
    pts = chart.sample(100, seed=2)
    assert killing_defect(g, eta, pts) == 0.0
    base = Chart.box(["r", "w"], [(0.5, 2), (-3, 3)])
    gf = GroupFibering(g, eta, base, SmoothMap(chart, base, ("r", "f - 0.7*z")), ("r", "w + 0.7*s", "s"))
    chi = connection_form(gf, pts)
    etav = np.tile([0.0, 0.7, 1.0], (100, 1))
    np.testing.assert_allclose(np.sum(chi.evaluate(pts) * etav, axis=1), 1.0, atol=1e-14)


def test_non_killing_field_rejected():
    chart = Chart.box(["x", "y"], [(-1, 1), (-1, 1)])
    base = Chart.box(["y"], [(-1, 1)])
    gf = GroupFibering(euclidean(chart), VectorField(chart, ("1 + y^2", "0")), base,
                       SmoothMap(chart, base, ("y",)), ("s", "y"))
    assert killing_defect(gf.metric, gf.eta, chart.sample(20, seed=0)) > 0.1
    with pytest.raises(ConnectionError, match="Killing"):
        gf.check()


def test_example2_curvature_value():
    fx = load("example2")
    gf = fibering_of(fx)
    cur = curvature(connection_form(gf), gf)
    F = cur.projected(np.array([[0.3, 0.2]]))[0]
    assert abs(F[0, 1]) == pytest.approx(math.exp(-0.3), rel=1e-12)
    assert F[0, 1] == pytest.approx(-F[1, 0])


def test_perturbed_form_does_not_decompose():
    fx = load("trivial-fibering")
    gf = fibering_of(fx)
    chi = connection_form(gf)
    decompose(chi, gf)
    perturbed = chi + OneForm(fx.chart, ("0", "0.1*x"))
    with pytest.raises(DecompositionError):
        decompose(perturbed, gf)


@pytest.mark.parametrize("period", [1.0, 0.5, 0.3, 0.25, 0.4])
def test_heisenberg_vertical_period_and_shift(period):
    gf = heisenberg(period)
    gf.check()
    dec = decompose(connection_form(gf), gf)
    assert dec.H == pytest.approx(period, rel=1e-10)
    loops = [Loop("y", gf.base, ("0", "t"))]
    v = lift_check(gf, dec.chi_prime, dec.H, {"shift": ("x + 1", "y")}, loops)[0]
    assert v.periods["y"] == pytest.approx(1.0, abs=1e-10)
    ratio = 1.0 / period
    assert v.liftable == (abs(ratio - round(ratio)) < 1e-9)


def test_rotation_family_conjugation_periods():
    fx = load("rotation-family")
    results = {r.name: r for r in liftcheck_checks(fx)}
    conj = results["lift.conjugation"]
    assert conj.outcome == "not-liftable"
    assert conj.values["period.t1"] == pytest.approx(-2 * math.pi / 3, abs=1e-8)
    assert conj.values["period.t2"] == pytest.approx(-2 * math.sqrt(2) * math.pi / 3, abs=1e-8)
    assert results["lift.shift"].outcome == "liftable"
    assert results["lift.identity"].outcome == "liftable"


def test_exterior_derivative_of_x_dy():
    pts = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    d = exterior_derivative_numeric(lambda p: np.stack([np.zeros(len(p)), p[:, 0]], axis=1), pts)
    np.testing.assert_allclose(d[:, 0, 1], 1.0, atol=1e-10)
    np.testing.assert_allclose(d[:, 1, 0], -1.0, atol=1e-10)
    np.testing.assert_allclose(d[:, 0, 0], 0.0, atol=1e-12)


def test_open_loop_rejected():
    base = Chart.box(["x", "y"], [(-1, 1), (-1, 1)])
    with pytest.raises(ValueError, match="not closed"):
        Loop("bad", base, ("t", "0"))
    Loop("wrapped", Chart.box(["a"], [(0, 1, True)]), ("t",))


@pytest.mark.parametrize("name", [n for n in fixture_names() if load(n).connection is not None])
def test_dd_chi_vanishes(name):
    fx = load(name)
    gf = fibering_of(fx)
    chi = connection_form(gf)
    assert ddchi_defect(chi, fx.chart.sample(30, seed=42, margin=0.05)) < 1e-4


@pytest.mark.parametrize("name", [n for n in fixture_names() if load(n).connection is not None])
def test_liftcheck_verdicts_match_declarations(name):
    results = liftcheck_checks(load(name))
    bad = [r.line() for r in results if not r.ok]
    assert not bad
    assert all(r.outcome != "inconsistent" for r in results)
