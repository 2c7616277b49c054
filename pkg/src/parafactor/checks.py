"""Check pipelines run on fixtures: reduction, solution verification, lifting, and the rest.

Every check yields a :class:`CheckResult` whose ``outcome`` ("pass" or
"fail") is compared with the fixture's declared expectation; a check
*succeeds* when the two agree, so negative controls succeed by failing.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .connection import (ConnectionError, GroupFibering, Loop, OneForm, connection_form, curvature,
                         curvature_invariance_defect, ddchi_defect, decompose, lift_check)
from .expr import Const, DomainError, Var, evaluate
from .geometry import VectorField, euclidean, laplace_beltrami, theta_field
from .manifest import Fixture
from .operators import (ClassificationError, Morphism, apply, classify_diffusivity, invariance_check,
                        lift_solution, pe_prime_defect, test_functions)
from .projectibility import (FIBER_THRESHOLD, FIBER_THRESHOLD_NUMERIC, InconclusiveError,
                             ProjectionError, SmoothMap, compare_operators, conformal_factor_check,
                             fiber_constancy, project_operator, quotient_consistency)
from .solver import BlowUpError, Grid, SolverError, convergence_order, residual, solve, stable_dt

__all__ = ["CheckResult", "UsageError", "run_check_all", "reduce_check", "verify_check",
           "liftcheck_checks", "classify_checks", "extra_checks", "validation_checks",
           "canonical_check", "printed_checks", "REDUCE_TOL", "ORDER_RANGE"]

REDUCE_TOL = 1e-5
ORDER_RANGE = (1.8, 2.2)
ORDER_FLAG = 1.5


class UsageError(ValueError):
    """The requested pipeline cannot run with the given fixture or options."""


@dataclass
class CheckResult:
    name: str
    outcome: str  # pass | fail
    expected: str = "pass"
    witness: float | None = None
    detail: str = ""
    values: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.outcome == self.expected

    def line(self) -> str:
        status = "ok" if self.ok else "MISMATCH"
        w = "" if self.witness is None else f" witness={self.witness:.3e}"
        return f"[{status}] {self.name}: {self.outcome} (expected {self.expected}){w} {self.detail}".rstrip()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def validation_checks(fx: Fixture, seed: int = 42) -> list[CheckResult]:
    """Invariants beyond parsing (parsing already rejects invalid metrics)."""
    out = [CheckResult("check.manifest", "pass", detail="declared objects satisfy their invariants")]
    if fx.printed_metric is not None:
        pts = fx.chart.sample(100, seed=seed)
        dets = np.linalg.det(fx.printed_metric.at(pts))
        worst = float(np.max(np.abs(dets)))
        singular = worst < 1e-9
        out.append(CheckResult("check.printed_metric", "fail" if singular else "pass",
                               fx.expectation("printed_metric"), worst,
                               "printed metric is singular; the fixture uses the corrected metric"
                               if singular else "printed metric is nondegenerate",
                               {"printed_metric_max_abs_det": worst}))
    return out


def printed_checks(fx: Fixture, seed: int = 42) -> list[CheckResult]:
    """Compare the operator built from the metric with a printed expanded operator."""
    if fx.printed is None or fx.operator is None:
        return []
    pts = fx.chart.sample(200, seed=seed)
    dev = compare_operators(fx.operator, fx.printed, pts)
    tol = fx.tolerances.get("printed", 1e-8)
    return [CheckResult("printed_operator", "pass" if dev < tol else "fail", fx.expectation("printed_operator"),
                        dev, "expanded operator versus metric Laplacian", {"printed_operator_deviation": dev})]


# ---------------------------------------------------------------------------
# reduction
# ---------------------------------------------------------------------------

def reduce_check(fx: Fixture, seed: int = 42, tol_scale: float = 1.0):
    """Run the projection test; returns (CheckResult, ProjectionReport or None)."""
    if fx.fibering is None or fx.operator is None:
        raise UsageError(f"fixture {fx.name} declares no operator and fibering")
    expected = fx.expectation("project")
    threshold = None
    if "fiber" in fx.tolerances:
        threshold = fx.tolerances["fiber"]
    try:
        rep = project_operator(fx.operator, fx.fibering, expected=fx.expected, seed=seed,
                               threshold=None if threshold is None else threshold * tol_scale)
        if threshold is None and tol_scale != 1.0:
            rep = project_operator(fx.operator, fx.fibering, expected=fx.expected, seed=seed,
                                   threshold=rep.threshold * tol_scale)
    except (ProjectionError, InconclusiveError) as exc:
        return CheckResult("project", "fail", expected, None, f"numerical failure: {exc}"), None
    values = {"projectible": rep.projectible, "fiber_witness": rep.witness, "fiber_threshold": rep.threshold,
              "witness_location": ", ".join(_fmt(v) for v in rep.location or ()),
              "worst_test_function": rep.worst_function, "condition_number": rep.condition}
    reduce_tol = fx.tolerances.get("reduce", REDUCE_TOL) * tol_scale
    outcome = "pass" if rep.projectible else "fail"
    detail = str(rep)
    if rep.projectible and rep.deviation is not None:
        values["expected_max_deviation"] = rep.deviation
        values["expected_tolerance"] = reduce_tol
        if rep.deviation >= reduce_tol:
            outcome = "fail"
            detail += f" exceeds {reduce_tol:.1e}"
    if rep.projectible and fx.operator.pe_prime and rep.grid is not None:
        defect = pe_prime_defect(rep.reduced, rep.grid.bindings(t=0.0), rep.u_values)
        rep.pe_prime_defect = defect
        values["pe_prime_defect"] = defect
    return CheckResult("project", outcome, expected, rep.witness, detail, values), rep


# ---------------------------------------------------------------------------
# solve, lift, residual
# ---------------------------------------------------------------------------

def _level_nodes(base: dict, factor: float, periodic: dict, axes) -> dict:
    out = {}
    for c, n in base.items():
        if c not in axes:
            out[c] = n
            continue
        if periodic[c]:
            m = n * factor
        else:
            m = (n - 1) * factor + 1
        if abs(m - round(m)) > 1e-9:
            raise UsageError(f"node count {n} on axis {c} cannot be scaled by {factor}")
        out[c] = int(round(m))
    return out


def _grid(chart, nodes: dict, bcs: dict) -> Grid:
    from .solver import BoundaryCondition

    conds = []
    for c, iv in zip(chart.coords, chart.intervals):
        if c in bcs:
            conds.append(bcs[c])
        else:
            conds.append(BoundaryCondition("periodic" if iv.periodic else "dirichlet"))
    return Grid(chart, tuple(nodes[c] for c in chart.coords), tuple(conds))


def _reduced_operator(fx: Fixture, rep=None):
    if fx.expected is not None:
        return fx.expected
    if rep is None:
        _, rep = reduce_check(fx)
    if rep is None or rep.reduced is None:
        raise UsageError("no reduced operator available for the solver")
    return rep.reduced


def verify_check(fx: Fixture, refinements: int = 3, snapshots: int = 16, tol_scale: float = 1.0,
                 lift=None, seed: int = 42):
    """Solve the reduced equation, lift it, and measure the source-equation residual.

    The reduced problem is solved to T on ``refinements`` grids whose spacing
    halves each time (the manifest base grid is the second level).  From the
    state at T three further snapshots one explicit step apart are lifted and
    the residual of the source operator is taken at the middle one, so that
    u_t is resolved at the time-step scale.
    """
    spec = fx.solver
    if spec is None or fx.fibering is None or fx.operator is None:
        raise UsageError(f"fixture {fx.name} declares no solver settings")
    if spec.T <= 0:
        raise UsageError("final time must be positive: a zero-length series has no residual")
    if refinements < 2:
        raise UsageError("at least two refinements are needed for a convergence order")
    if snapshots < 2:
        raise UsageError("at least two snapshots are needed")
    L_red = _reduced_operator(fx)
    target, chart = fx.fibering.target, fx.chart
    tperiodic = {c: iv.periodic for c, iv in zip(target.coords, target.intervals)}
    xperiodic = {c: iv.periodic for c, iv in zip(chart.coords, chart.intervals)}
    lift_expr = spec.lift if lift is None else lift
    morphism = Morphism(chart.coords, dict(zip(target.coords, fx.fibering.map.components)),
                        spec.u_map, u_inverse=lift_expr)
    hs, errs, rows = [], [], []
    for j in range(refinements):
        factor = 2.0 ** (j - 1)
        ygrid = _grid(target, _level_nodes(spec.nodes, factor, tperiodic, target.coords), spec.bcs)
        xgrid = _grid(chart, _level_nodes(spec.xnodes, factor, xperiodic, spec.refine), {})
        series = solve(L_red, ygrid, spec.ic, spec.T, snapshots=snapshots)
        dt = stable_dt(L_red, ygrid, series.values[-1], series.times[-1])
        probe = solve(L_red, ygrid, series.snapshot(-1), 2 * dt, snapshots=3, dt=dt)
        lifted = lift_solution(morphism, probe, xgrid)
        rep = residual(fx.operator, lifted)
        h = max(ygrid.spacing)
        hs.append(h)
        errs.append(rep.max_norm)
        rows.append((ygrid.shape, h, dt, rep.max_norm, rep.l2_norm))
    order = convergence_order(hs, errs) if min(errs) > 0 else math.inf
    threshold = spec.threshold * tol_scale
    values = {}
    for k, (shape, h, dt, mx, l2) in enumerate(rows):
        values[f"level{k}.grid"] = "x".join(str(n) for n in shape)
        values[f"level{k}.h"] = h
        values[f"level{k}.dt"] = dt
        values[f"level{k}.residual_max"] = mx
        values[f"level{k}.residual_l2"] = l2
    values["order"] = order
    values["residual_threshold"] = threshold
    finest = errs[-1]
    passed = finest < threshold and ORDER_RANGE[0] <= order <= ORDER_RANGE[1]
    detail = f"order {order:.3f}, finest residual {finest:.3e} (threshold {threshold:.1e})"
    if order < ORDER_FLAG:
        detail += "; non-convergent order"
    name = "verify" if lift is None else "verify.lift"
    expected = fx.expectation("verify") if lift is None else "pass"
    return CheckResult(name, "pass" if passed else "fail", expected, finest, detail, values)


def control_check(fx: Fixture, snapshots: int = 16, tol_scale: float = 1.0) -> CheckResult | None:
    """Residual of a deliberately wrong lift on the base grid; expected to fail."""
    spec = fx.solver
    if spec is None or spec.control is None:
        return None
    L_red = _reduced_operator(fx)
    target, chart = fx.fibering.target, fx.chart
    ygrid = _grid(target, spec.nodes, spec.bcs)
    xgrid = _grid(chart, spec.xnodes, {})
    series = solve(L_red, ygrid, spec.ic, spec.T, snapshots=snapshots)
    dt = stable_dt(L_red, ygrid, series.values[-1], series.times[-1])
    probe = solve(L_red, ygrid, series.snapshot(-1), 2 * dt, snapshots=3, dt=dt)
    morphism = Morphism(chart.coords, dict(zip(target.coords, fx.fibering.map.components)),
                        Var("u"), u_inverse=spec.control)
    rep = residual(fx.operator, lift_solution(morphism, probe, xgrid))
    threshold = spec.threshold * tol_scale
    outcome = "pass" if rep.max_norm < threshold else "fail"
    return CheckResult("verify.control", outcome, fx.expectation("verify.control", "fail"), rep.max_norm,
                       f"wrong lift residual {rep.max_norm:.3e} ({rep.max_norm / threshold:.3g} x threshold)",
                       {"control_residual": rep.max_norm, "control_ratio": rep.max_norm / threshold})


# ---------------------------------------------------------------------------
# connection and lifting
# ---------------------------------------------------------------------------

def _group_fibering(fx: Fixture) -> GroupFibering:
    spec = fx.connection
    if fx.metric is None:
        raise UsageError("connection checks need a metric")
    pmap = SmoothMap(fx.chart, spec.base, spec.projection)
    return GroupFibering(fx.metric, VectorField(fx.chart, spec.eta), spec.base, pmap, spec.section,
                         spec.topology, spec.fiber_range, spec.param)


def liftcheck_checks(fx: Fixture, seed: int = 42, tol_scale: float = 1.0) -> list[CheckResult]:
    spec = fx.connection
    if spec is None:
        raise UsageError(f"fixture {fx.name} declares no connection data")
    gf = _group_fibering(fx)
    out = []
    try:
        info = gf.check(seed=seed)
    except ConnectionError as exc:
        return [CheckResult("connection.fibering", "fail", "pass", None, str(exc))]
    out.append(CheckResult("connection.fibering", "pass", "pass", info["killing_defect"],
                           "generator is a nonvanishing Killing field with a valid section", info))
    chi = connection_form(gf)
    pts = fx.chart.sample(30, seed=seed, margin=0.05)
    dd = ddchi_defect(chi, pts)
    out.append(CheckResult("connection.ddchi", "pass" if dd < 1e-4 * tol_scale else "fail", "pass", dd,
                           "numeric d(d chi)", {"ddchi_max": dd}))
    cur = curvature(chi, gf, seed=seed)
    F = cur.projected(spec.base.sample(50, seed=seed))
    fmax = float(np.max(np.abs(F)))
    if spec.expect_curvature_zero is not None:
        flat = fmax < 1e-9
        out.append(CheckResult("connection.curvature", "pass" if flat == spec.expect_curvature_zero else "fail",
                               "pass", fmax, f"max |F| {fmax:.3e}", {"curvature_max": fmax,
                                                                    "curvature_fiber_witness": cur.fiber_witness}))
    form = chi
    if spec.perturb is not None:
        form = chi + OneForm(fx.chart, spec.perturb)
    try:
        dec = decompose(form, gf, seed=seed)
        dec_outcome, dec_detail, dec_w = "pass", str(dec), dec.residual
    except ConnectionError as exc:
        dec, dec_outcome, dec_detail, dec_w = None, "fail", str(exc), None
    values = {}
    if dec is not None:
        values = {"decompose_residual": dec.residual, "H": "none" if dec.H is None else dec.H}
    out.append(CheckResult("connection.decompose", dec_outcome, spec.expect_decompose, dec_w, dec_detail, values))
    if dec is not None and spec.expect_H is not None:
        H = dec.H if dec.H is not None else math.nan
        ok = abs(H - spec.expect_H) < 1e-6 * (1 + abs(spec.expect_H))
        out.append(CheckResult("connection.H", "pass" if ok else "fail", "pass", abs(H - spec.expect_H),
                               f"H = {H:.10g}, declared {spec.expect_H:.10g}"))
    if spec.generators and dec is not None and spec.perturb is None:
        if not spec.loops:
            raise UsageError("lift check needs loops")
        loops = [Loop(name, spec.base, comps) for name, comps in spec.loops]
        gens = {g.name: g.components for g in spec.generators}
        verdicts = lift_check(gf, dec.chi_prime, dec.H, gens, loops, seed=seed,
                              closed_tol=1e-6 * tol_scale, period_tol=1e-6 * tol_scale)
        by_name = {g.name: g for g in spec.generators}
        base_pts = spec.base.sample(30, seed=seed, margin=0.05)
        for v in verdicts:
            expect = by_name[v.generator].expect
            outcome = "liftable" if v.liftable else "not-liftable"
            vals = {"closed_defect": v.closed_defect, "H": "none" if v.H is None else v.H}
            vals.update({f"period.{k}": p for k, p in v.periods.items()})
            if v.liftable:
                inv = curvature_invariance_defect(cur, gens[v.generator], base_pts)
                vals["curvature_invariance_defect"] = inv
                if inv > 1e-5:
                    outcome = "inconsistent"
            witness = max([abs(p) for p in v.periods.values()] + [v.closed_defect])
            out.append(CheckResult(f"lift.{v.generator}", outcome, expect or "liftable", witness, str(v), vals))
    return out


# ---------------------------------------------------------------------------
# classification, canonical operators, extra checks
# ---------------------------------------------------------------------------

_CLASS = re.compile(r"^(constant|power|exponential|arbitrary)\s*(?:\(([^)]*)\))?$")


def _parse_class(text: str):
    m = _CLASS.match(text.strip())
    if not m:
        raise UsageError(f"cannot read expected diffusivity class {text!r}")
    params = [float(p) for p in m.group(2).split(",")] if m.group(2) else []
    return m.group(1), params


def classify_checks(fx: Fixture, tol_scale: float = 1.0) -> list[CheckResult]:
    out = []
    for spec in fx.classify:
        try:
            cls = classify_diffusivity(spec.a, spec.u_range)
        except ClassificationError as exc:
            out.append(CheckResult(f"classify.{spec.name}", "fail", "pass", None, str(exc)))
            continue
        values = {"class": str(cls)}
        if not spec.expect:
            out.append(CheckResult(f"classify.{spec.name}", "pass", "pass", None, str(cls), values))
            continue
        tag, params = _parse_class(spec.expect)
        got = {"constant": [cls.a0], "power": [cls.a0, cls.u0, cls.lam],
               "exponential": [cls.a0, cls.lam], "arbitrary": []}[cls.tag]
        err = max([abs(a - b) for a, b in zip(got, params)], default=0.0)
        ok = cls.tag == tag and len(got) == len(params) and err < 1e-6 * tol_scale
        out.append(CheckResult(f"classify.{spec.name}", "pass" if ok else "fail", "pass", err,
                               f"{cls} (expected {spec.expect})", values))
    return out


def canonical_check(fx: Fixture, seed: int = 42, tol_scale: float = 1.0) -> CheckResult | None:
    """Coefficient-form D against its defining formula on the standard test functions."""
    spec = fx.canonical
    if spec is None or fx.operator is None or fx.metric is None or fx.operator_kind != "canonical":
        return None
    lb = laplace_beltrami(fx.metric)
    pts = fx.chart.sample(200, seed=seed, margin=0.02)
    b = fx.chart.bindings(pts)
    beta = spec.beta
    worst = 0.0
    for f in test_functions(fx.chart.coords, 12):
        lhs = apply(fx.operator, f, pts)
        bv = np.asarray(evaluate(beta, b), float)
        if spec.case == "power":
            fv = np.asarray(evaluate(f, b), float)
            rhs = bv ** (spec.lam - 1) * (apply(lb, beta * f, pts) + spec.q0 * bv * fv)
        elif spec.case == "exponential":
            rhs = np.exp(spec.lam * bv) * (apply(lb, f, pts) + apply(lb, beta, pts) + spec.q0)
        else:
            rhs = apply(lb, f, pts)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    tol = fx.tolerances.get("canonical", 1e-8) * tol_scale
    return CheckResult("canonical", "pass" if worst < tol else "fail", fx.expectation("canonical"), worst,
                       f"canonical operator versus defining formula, 12 test functions",
                       {"canonical_max_deviation": worst})


def extra_checks(fx: Fixture, seed: int = 42, tol_scale: float = 1.0) -> list[CheckResult]:
    out = []
    for spec in fx.extra_checks:
        if spec.kind == "invariance":
            if fx.operator is None:
                raise UsageError("invariance check needs an operator")
            rep = invariance_check(fx.operator, spec.data["T"], seed=seed, threshold=1e-6 * tol_scale)
            out.append(CheckResult(spec.name, "pass" if rep.passed else "fail", spec.expect, rep.witness,
                                   str(rep), {"excluded_points": len(rep.excluded)}))
        elif spec.kind == "quotient":
            gap, n = quotient_consistency(fx.chart, spec.data["map"], spec.data["T"], seed=seed)
            tol = 1e-10 * tol_scale
            out.append(CheckResult(spec.name, "pass" if gap < tol else "fail", spec.expect, gap,
                                   f"max |p(x) - p(T x)| over {n} points"))
        elif spec.kind == "conformal":
            fmap = SmoothMap(fx.chart, fx.chart, spec.data["map"])
            rep = conformal_factor_check(fmap, spec.data["lambda"], seed=seed, threshold=1e-9 * tol_scale)
            out.append(CheckResult(spec.name, "pass" if rep.passed else "fail", spec.expect,
                                   rep.max_relative_deviation, str(rep)))
        elif spec.kind == "theta":
            if fx.metric is None or fx.fibering is None:
                raise UsageError("theta check needs a metric and a fibering")
            theta = theta_field(fx.metric, VectorField(fx.chart, spec.data["eta"]))
            rep = fiber_constancy(theta, fx.fibering, seed=seed, threshold=FIBER_THRESHOLD * tol_scale)
            out.append(CheckResult(spec.name, "pass" if rep.constant else "fail", spec.expect, rep.witness,
                                   str(rep)))
    return out


def run_check_all(fx: Fixture, seed: int = 42, tol_scale: float = 1.0, refinements: int = 3,
                  snapshots: int = 16) -> list[CheckResult]:
    """Every check the fixture declares, in a fixed order."""
    results = validation_checks(fx, seed)
    results += printed_checks(fx, seed)
    rep = None
    if fx.fibering is not None and fx.operator is not None:
        res, rep = reduce_check(fx, seed, tol_scale)
        results.append(res)
    if fx.solver is not None:
        try:
            results.append(verify_check(fx, refinements, snapshots, tol_scale, seed=seed))
            ctrl = control_check(fx, snapshots, tol_scale)
            if ctrl is not None:
                results.append(ctrl)
        except (BlowUpError, SolverError, DomainError) as exc:
            results.append(CheckResult("verify", "fail", fx.expectation("verify"), None, str(exc)))
    if fx.connection is not None:
        results += liftcheck_checks(fx, seed, tol_scale)
    results += classify_checks(fx, tol_scale)
    can = canonical_check(fx, seed, tol_scale)
    if can is not None:
        results.append(can)
    results += extra_checks(fx, seed, tol_scale)
    return results
