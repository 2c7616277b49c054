import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from parafactor.corpus import load
from parafactor.expr import diff, evaluate, parse
from parafactor.geometry import Chart, MetricField, euclidean, laplace_beltrami
from parafactor.operators import (CanonicalMorphismSpec, ClassificationError, Morphism, ParabolicOperator,
                                  apply, canonical_operator_D, classify_diffusivity, heat_operator,
                                  invariance_check, lift_solution, pe_prime_defect)
from parafactor.operators import test_functions as probe_functions
from parafactor.solver import Grid, GridField

PLANE = Chart.box(["x", "y"], [(-1, 1), (-1, 1)])


def test_example1_operator_on_radial_quadratic():
    L = load("example1").operator
    assert apply(L, "x^2 + y^2", (0.3, 0.2, 0.1, -0.4)) == pytest.approx(4.0, abs=1e-12)


def test_example2_operator_on_x():
    L = load("example2").operator
    pts = L.chart.sample(50, seed=0)
    np.testing.assert_allclose(apply(L, "x", pts), 1.0, atol=1e-13)


def test_zero_operator():
    L = ParabolicOperator.zero(PLANE)
    assert apply(L, "exp(x)*sin(y)", (0.1, 0.2)) == 0.0


def test_heat_operator_uses_u_value():
    L = heat_operator(euclidean(PLANE), a="1 + u^2", q="u")
    # f = x^2: Lap f = 2, u = f = 0.25 at x = 0.5
    assert apply(L, "x^2", (0.5, 0.0)) == pytest.approx((1 + 0.0625) * 2 + 0.25)
    assert apply(L, "x^2", (0.5, 0.0), u_value=2.0) == pytest.approx(5 * 2 + 2.0)
    assert L.pe_prime


def test_canonical_generic_is_laplace_beltrami():
    g = MetricField(PLANE, [["2", "0.5*x"], ["0.5*x", "1 + y^2"]])
    D = canonical_operator_D(CanonicalMorphismSpec("generic"), g)
    pts = PLANE.sample(20, seed=1)
    f = "sin(x)*y + x^3"
    np.testing.assert_allclose(apply(D, f, pts), apply(laplace_beltrami(g), f, pts))


def test_canonical_power_with_unit_beta():
    g = euclidean(PLANE)
    D = canonical_operator_D(CanonicalMorphismSpec("power", beta="1", lam=3.0, q0=0.7), g)
    pts = PLANE.sample(20, seed=2)
    f = "x^2*y + cos(y)"
    lap = apply(laplace_beltrami(g), f, pts)
    fv = evaluate(parse(f), PLANE.bindings(pts))
    np.testing.assert_allclose(apply(D, f, pts), lap + 0.7 * fv, atol=1e-13)


def test_canonical_exponential_in_one_dimension():
    line = Chart.box(["x"], [(-1, 1)])
    lam = 1.5
    D = canonical_operator_D(CanonicalMorphismSpec("exponential", beta="x", lam=lam, q0=0.0), euclidean(line))
    pts = line.sample(20, seed=3)
    f = parse("sin(2*x) + x^4")
    fpp = evaluate(diff(diff(f, "x"), "x"), {"x": pts[:, 0]})
    np.testing.assert_allclose(apply(D, f, pts), np.exp(lam * pts[:, 0]) * fpp, rtol=1e-12)


def test_canonical_power_against_defining_formula():
    fx = load("canonical-power")
    spec, g = fx.canonical, fx.metric
    D = canonical_operator_D(spec, g)
    lb = laplace_beltrami(g)
    pts = g.chart.sample(30, seed=4)
    b = g.chart.bindings(pts)
    beta = evaluate(spec.beta, b)
    for f in probe_functions(g.chart.coords)[:6]:
        bf = spec.beta * f
        expected = beta ** (spec.lam - 1) * (apply(lb, bf, pts) + spec.q0 * evaluate(bf, b))
        np.testing.assert_allclose(apply(D, f, pts), expected, rtol=1e-9, atol=1e-9)


def test_canonical_spec_validation():
    with pytest.raises(ValueError):
        CanonicalMorphismSpec("cubic")
    with pytest.raises(ValueError):
        CanonicalMorphismSpec("power", lam=0.0)


@pytest.mark.parametrize("a, rng, tag, params", [
    ("5", (0.5, 2), "constant", {"a0": 5}),
    ("3*(u - 1)^2", (2, 5), "power", {"a0": 3, "u0": 1, "lam": 2}),
    ("u^2", (0.5, 2), "power", {"a0": 1, "u0": 0, "lam": 2}),
    ("2*(u + 3)^(-0.5)", (0.5, 2), "power", {"a0": 2, "u0": -3, "lam": -0.5}),
    ("2*exp(0.5*u)", (0.5, 2), "exponential", {"a0": 2, "lam": 0.5}),
    ("exp(-u)", (0.5, 2), "exponential", {"a0": 1, "lam": -1}),
    ("1 + u^2 + sin(u)", (0.5, 2), "arbitrary", {}),
    ("1 + u^2", (0.5, 2), "arbitrary", {}),
])
def test_classification_examples(a, rng, tag, params):
    cls = classify_diffusivity(a, rng)
    assert cls.tag == tag
    for k, v in params.items():
        assert getattr(cls, k) == pytest.approx(v, rel=1e-7, abs=1e-7)


def test_classification_errors():
    with pytest.raises(ClassificationError):
        classify_diffusivity("u - 1", (0.5, 2))
    with pytest.raises(ClassificationError):
        classify_diffusivity("1 + x*u")


@given(st.floats(0.1, 10), st.sampled_from(["3*(u - 1)^2", "2*exp(0.5*u)", "7", "1 + u^2 + sin(u)"]))
def test_classification_scales_a0_only(c, law):
    base = classify_diffusivity(law, (2, 5))
    scaled = classify_diffusivity(f"{c!r}*({law})", (2, 5))
    assert scaled.tag == base.tag
    if base.lam is not None:
        assert scaled.lam == pytest.approx(base.lam, rel=1e-8)
    if base.a0 is not None:
        assert scaled.a0 == pytest.approx(c * base.a0, rel=1e-8)


def test_example6_invariance():
    fx = load("example6")
    checks = {c.name: c for c in fx.extra_checks if c.kind == "invariance"}
    for name, spec in checks.items():
        rep = invariance_check(fx.operator, spec.data["T"], threshold=1e-6)
        assert rep.passed == (spec.expect == "pass"), (name, rep)


def test_invariance_excludes_undefined_points():
    L = laplace_beltrami(euclidean(PLANE))
    rep = invariance_check(L, ["log(x)", "y"], threshold=1e-6)
    assert rep.excluded
    assert rep.evaluated + len(rep.excluded) == 200


def test_structured_form_defect_of_heat_operator():
    L = heat_operator(load("example2").metric, a="1 + u^2")
    b = L.chart.bindings(L.chart.sample(30, seed=0))
    assert pe_prime_defect(L, b, u_values=(0.0, 0.5, 1.5)) < 1e-12


def test_lift_solution_power_case():
    line = Chart.box(["x"], [(0, 1)])
    spec = CanonicalMorphismSpec("power", beta="2", lam=1.0)
    m = spec.morphism(["x"], {"x": "x"})
    grid = Grid(line, (11,))
    v = GridField(grid, (0.0, 0.1), np.full((2, 11), 3.0))
    u = lift_solution(m, v, grid)
    np.testing.assert_allclose(u.values, 6.0)


def test_lift_solution_numeric_inverse():
    line = Chart.box(["x"], [(0, 1)])
    m = Morphism(("x",), {"x": "x"}, u_map="u^3 + u")
    grid = Grid(line, (9,))
    target = np.linspace(-1, 1, 9)
    vals = target ** 3 + target
    u = lift_solution(m, GridField(grid, (0.0,), vals[None]), grid)
    np.testing.assert_allclose(u.values[0], target, atol=1e-12)


def test_grid_field_application_is_second_order():
    chart = Chart.box(["x", "y"], [(0, 1, True), (-1, 1)])
    L2 = heat_operator(MetricField(chart, [["1", "0"], ["0", "2"]]))
    f = "sin(6.283185307179586*x)*cos(y)"
    errs = []
    for n in (16, 32, 64):
        grid = Grid(chart, (n, n + 1))
        field = GridField(grid, (0.0,), grid.sample(f)[None])
        p = (0.25, 0.0)
        errs.append(abs(apply(L2, field, p) - apply(L2, f, p)))
    assert errs[1] < errs[0] / 3.5 and errs[2] < errs[1] / 3.5


def test_test_functions_cover_all_mixed_derivatives():
    coords = ["a", "b", "c", "d"]
    fs = probe_functions(coords)
    assert len(fs) == 12
    for i in coords:
        for j in coords:
            assert any(diff(diff(f, i), j) != parse("0") for f in fs), (i, j)
    b = {c: 0.3 for c in coords}
    for i in coords:
        for j in coords:
            vals = [evaluate(diff(diff(f, i), j), b) for f in fs]
            assert any(abs(v) > 1e-8 for v in vals), (i, j)


def test_operator_shape_is_validated():
    with pytest.raises(ValueError):
        ParabolicOperator(PLANE, (("1",),), (("0",),), ("0",))
