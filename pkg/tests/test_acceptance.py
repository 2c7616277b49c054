"""Acceptance criteria 1-11, one test each.

Every test appends a ``criterion N: PASS|FAIL ...`` line that is printed in
the pytest terminal summary.  Run this file directly for the lines alone.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from parafactor.checks import liftcheck_checks, verify_check
from parafactor.connection import connection_form, ddchi_defect
from parafactor.corpus import fixture_names, load
from parafactor.expr import diff, evaluate, parse
from parafactor.geometry import laplace_beltrami
from parafactor.operators import apply, canonical_operator_D, classify_diffusivity, invariance_check
from parafactor.operators import test_functions as probe_functions
from parafactor.projectibility import SmoothMap, conformal_factor_check, project_operator
from test_connection import fibering_of


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def test_criterion_01_example1_projects():
    start = time.perf_counter()
    fx = load("example1")
    rep = project_operator(fx.operator, fx.fibering, fx.expected)
    elapsed = time.perf_counter() - start
    ok = rep.projectible and rep.witness < 1e-5 and rep.deviation < 1e-4 and elapsed < 30
    record(1, ok, f"fiber witness {rep.witness:.2e} < 1e-5, deviation from v_xx + v_yy {rep.deviation:.2e} "
                  f"< 1e-4, {elapsed:.1f} s < 30 s")
    assert rep.projectible and rep.witness < 1e-5
    assert rep.deviation < 1e-4
    assert elapsed < 30


def test_criterion_02_example2_end_to_end():
    start = time.perf_counter()
    fx = load("example2")
    res = verify_check(fx, refinements=3)
    elapsed = time.perf_counter() - start
    order = res.values["order"]
    grids = ", ".join(res.values[f"level{k}.grid"] for k in range(3))
    ok = 1.8 <= order <= 2.2 and elapsed < 120 and res.outcome == "pass"
    record(2, ok, f"order {order:.3f} in [1.8, 2.2] over grids {grids}, finest residual "
                  f"{res.witness:.2e}, {elapsed:.1f} s < 120 s")
    assert res.values["level1.grid"] == "64x65"
    assert 1.8 <= order <= 2.2
    assert res.outcome == "pass"
    assert elapsed < 120


@pytest.mark.parametrize("n, name, label", [(3, "example3", "v_xx"), (4, "example4", "v_yy")])
def test_criteria_03_04_reductions(n, name, label):
    fx = load(name)
    rep = project_operator(fx.operator, fx.fibering, fx.expected)
    ok = rep.projectible and rep.deviation < 1e-5
    record(n, ok, f"{name} reduces to {label}: deviation {rep.deviation:.2e} < 1e-5")
    assert rep.projectible
    assert rep.deviation < 1e-5


def test_criterion_05_conformal_identity():
    fx = load("example5")
    spec = next(c for c in fx.extra_checks if c.kind == "conformal")
    rep = conformal_factor_check(SmoothMap(fx.chart, fx.chart, spec.data["map"]), spec.data["lambda"], count=200)
    ok = rep.passed and rep.max_relative_deviation < 1e-9
    record(5, ok, f"max relative deviation {rep.max_relative_deviation:.2e} < 1e-9 over {rep.evaluated} points")
    assert rep.evaluated >= 190
    assert rep.max_relative_deviation < 1e-9


def test_criterion_06_example6_invariance():
    fx = load("example6")
    specs = {c.name: c for c in fx.extra_checks if c.kind == "invariance"}
    g = invariance_check(fx.operator, specs["invariance.g"].data["T"], threshold=1e-6)
    shift = invariance_check(fx.operator, specs["invariance.translation"].data["T"], threshold=1e-6)
    ok = g.passed and not shift.passed and shift.witness > 1e-2
    record(6, ok, f"g witness {g.witness:.2e} < 1e-6, translation witness {shift.witness:.3f} > 1e-2")
    assert g.passed
    assert shift.witness > 1e-2


def test_criterion_07_canonical_power_operator():
    fx = load("canonical-power")
    spec, g = fx.canonical, fx.metric
    assert (spec.case, spec.lam, spec.q0) == ("power", 2.0, 1.0)
    D = canonical_operator_D(spec, g)
    lb = laplace_beltrami(g)
    pts = g.chart.sample(50, seed=42)
    b = g.chart.bindings(pts)
    beta = evaluate(spec.beta, b)
    worst = 0.0
    fs = probe_functions(g.chart.coords, 12)
    for f in fs:
        bf = spec.beta * f
        direct = beta ** (spec.lam - 1) * (apply(lb, bf, pts) + spec.q0 * evaluate(bf, b))
        worst = max(worst, float(np.max(np.abs(apply(D, f, pts) - direct))))
    record(7, worst < 1e-8, f"max |D f - formula| {worst:.2e} < 1e-8 over {len(fs)} test functions")
    assert len(fs) == 12
    assert worst < 1e-8


def test_criterion_08_classification():
    cases = [
        ("5", (0.5, 2.0), "constant", {"a0": 5.0}),
        ("3*(u - 1)^2", (2.0, 5.0), "power", {"a0": 3.0, "u0": 1.0, "lam": 2.0}),
        ("2*exp(0.5*u)", (0.5, 2.0), "exponential", {"a0": 2.0, "lam": 0.5}),
        ("1 + u^2 + sin(u)", (0.5, 2.0), "arbitrary", {}),
    ]
    worst, tags_ok = 0.0, True
    for a, rng, tag, params in cases:
        cls = classify_diffusivity(a, rng)
        tags_ok &= cls.tag == tag
        for k, v in params.items():
            worst = max(worst, abs(getattr(cls, k) - v))
    ok = tags_ok and worst < 1e-6
    record(8, ok, f"4/4 laws classified, max parameter error {worst:.2e} < 1e-6" if tags_ok
           else "a law was misclassified")
    assert tags_ok
    assert worst < 1e-6


def test_criterion_09_lift_test():
    trivial = {r.name: r for r in liftcheck_checks(load("trivial-fibering"))}
    lifts = [r for n, r in trivial.items() if n.startswith("lift.")]
    trivial_periods = [abs(v) for r in lifts for k, v in r.values.items() if k.startswith("period.")]
    family = {r.name: r for r in liftcheck_checks(load("rotation-family"))}
    conj = family["lift.conjugation"]
    periods = [v for k, v in conj.values.items() if k.startswith("period.")]
    H = conj.values["H"]
    far_from_lattice = all(abs(p) >= 1e-6 for p in periods) if H == "none" else \
        any(abs(p / H - round(p / H)) >= 1e-6 for p in periods)
    ok = (all(r.outcome == "liftable" for r in lifts) and max(trivial_periods) < 1e-6
          and conj.outcome == "not-liftable" and far_from_lattice)
    record(9, ok, f"trivial fibering liftable (max period {max(trivial_periods):.1e}); rotation family "
                  f"conjugation not liftable, periods {', '.join(f'{p:.4f}' for p in periods)}, H = {H}")
    assert all(r.outcome == "liftable" for r in lifts)
    assert max(trivial_periods) < 1e-6
    assert conj.outcome == "not-liftable"
    assert far_from_lattice


def test_criterion_10_negative_controls():
    fx1 = load("example1-perturbed")
    rep = project_operator(fx1.operator, fx1.fibering)
    r1 = rep.witness / rep.threshold
    fx2 = load("example2")
    ctrl = verify_check(fx2, refinements=2, lift=fx2.solver.control)
    r2 = ctrl.witness / ctrl.values["residual_threshold"]
    fx5 = load("example5-doubled")
    spec = next(c for c in fx5.extra_checks if c.kind == "conformal")
    conf = conformal_factor_check(SmoothMap(fx5.chart, fx5.chart, spec.data["map"]), spec.data["lambda"])
    r5 = conf.max_relative_deviation / conf.threshold
    ok = (not rep.projectible and ctrl.outcome == "fail" and not conf.passed
          and min(r1, r2, r5) >= 1e3)
    record(10, ok, f"witness/threshold: perturbed metric {r1:.2e}, wrong lift {r2:.2e}, "
                   f"doubled lambda {r5:.2e} (all >= 1e3)")
    assert not rep.projectible and r1 >= 1e3
    assert ctrl.outcome == "fail" and r2 >= 1e3
    assert not conf.passed and r5 >= 1e3


DERIVATIVE_CASES = [
    "x^3*y - 2*x*y^2", "exp(0.4*x)*sin(y)", "log(3 + x^2)*cos(x*y)", "sqrt(4 + x*y)",
    "1/(2 + sin(x)) - y^4", "x*exp(-y^2)/(1.5 + cos(y))", "abs(x + 3)*y^2", "sin(x)^2 + cos(y)^3",
    "(1 + x^2)^(-0.5)*exp(y)", "sign(x + 5)*x*y", "exp(sin(x*y))", "log(exp(x) + exp(y))",
]


def test_criterion_11_numerics_hygiene():
    rng = np.random.default_rng(42)
    pts = rng.uniform(-1, 1, (40, 2))
    h = 1e-5
    worst = 0.0
    for src in DERIVATIVE_CASES:
        e = parse(src)
        for var, k in (("x", 0), ("y", 1)):
            sym = evaluate(diff(e, var), {"x": pts[:, 0], "y": pts[:, 1]})
            step = np.zeros(2)
            step[k] = h
            up, dn = pts + step, pts - step
            fd = (evaluate(e, {"x": up[:, 0], "y": up[:, 1]}) - evaluate(e, {"x": dn[:, 0], "y": dn[:, 1]})) / (2 * h)
            worst = max(worst, float(np.max(np.abs(sym - fd) / (1 + np.abs(fd)))))
    dd = {}
    for name in fixture_names():
        fx = load(name)
        if fx.connection is None:
            continue
        chi = connection_form(fibering_of(fx))
        dd[name] = ddchi_defect(chi, fx.chart.sample(30, seed=42, margin=0.05))
    dd_max = max(dd.values())
    ok = worst < 1e-6 and dd_max < 1e-4
    record(11, ok, f"symbolic vs central difference {worst:.1e} < 1e-6 over {len(DERIVATIVE_CASES)} expressions; "
                   f"max |d d chi| {dd_max:.1e} < 1e-4 over {len(dd)} fixtures")
    assert worst < 1e-6
    assert dd_max < 1e-4


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
