"""Fixture manifests: a sectioned ``key = value`` text format.

Expressions are written as double-quoted strings; lists are comma
separated (the expression grammar has no commas, so splitting is safe).
The name ``pi`` may be used in expressions and bounds.  See
``docs/manifest.md`` in the repository for the full format.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .expr import Const, Expr, ParseError, Var, evaluate, parse, substitute
from .geometry import Chart, MetricError, MetricField, VectorField, euclidean, laplace_beltrami
from .operators import (CanonicalMorphismSpec, ParabolicOperator, canonical_operator_D,
                        heat_operator)
from .projectibility import Fibering, SmoothMap
from .solver import BoundaryCondition

__all__ = [
    "ManifestError", "InvariantError", "Fixture", "SolverSpec", "ConnectionSpec",
    "GeneratorSpec", "ClassifySpec", "CheckSpec", "parse_manifest", "read_manifest",
]


class ManifestError(ValueError):
    """The manifest text cannot be parsed (usage error)."""


class InvariantError(ValueError):
    """The manifest parses but a declared object violates its invariants."""


_ENTRY = re.compile(r"^(\w+)\(\s*(\w+)\s*(?:,\s*(\w+)\s*)?\)$")


def _unquote(text: str) -> str:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] == '"':
        return text[1:-1]
    return text


def _expr(text: str, where: str) -> Expr:
    try:
        e = parse(_unquote(text))
    except ParseError as exc:
        raise ManifestError(f"{where}: {exc}") from None
    if "pi" in e.free_variables:
        e = substitute(e, {"pi": Const(math.pi)})
    return e


def _number(text: str, where: str) -> float:
    e = _expr(text, where)
    if e.free_variables:
        raise ManifestError(f"{where}: expected a number, got {text!r}")
    return float(evaluate(e, {}))


def _split(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _exprs(text: str, where: str) -> tuple[Expr, ...]:
    return tuple(_expr(p, where) for p in _split(text))


@dataclass
class SolverSpec:
    ic: Expr
    T: float
    nodes: dict  # target axis -> base node count
    xnodes: dict  # source axis -> base node count
    refine: tuple  # source axes refined together with the target grid
    bcs: dict
    lift: Expr
    u_map: Expr
    control: Expr | None = None
    threshold: float = 1e-3


@dataclass
class GeneratorSpec:
    name: str
    components: tuple
    expect: str | None = None  # liftable | not-liftable


@dataclass
class ConnectionSpec:
    base: Chart
    eta: tuple
    projection: tuple
    section: tuple
    param: str
    topology: str
    fiber_range: tuple
    perturb: tuple | None = None
    generators: list = field(default_factory=list)
    loops: list = field(default_factory=list)  # (name, components)
    expect_H: float | None = None
    expect_decompose: str = "pass"
    expect_curvature_zero: bool | None = None


@dataclass
class ClassifySpec:
    name: str
    a: Expr
    u_range: tuple
    expect: str  # e.g. "power(3, 1, 2)"


@dataclass
class CheckSpec:
    name: str
    kind: str
    data: dict
    expect: str = "pass"


@dataclass
class Fixture:
    name: str
    version: str
    description: str
    chart: Chart
    metric: MetricField | None
    operator: ParabolicOperator | None
    operator_kind: str = ""
    target: Chart | None = None
    fibering: Fibering | None = None
    expected: ParabolicOperator | None = None
    printed: ParabolicOperator | None = None
    printed_metric: MetricField | None = None
    solver: SolverSpec | None = None
    connection: ConnectionSpec | None = None
    canonical: CanonicalMorphismSpec | None = None
    classify: list = field(default_factory=list)
    extra_checks: list = field(default_factory=list)
    expect: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    path: Path | None = None
    text: str = ""

    def expectation(self, check: str, default: str = "pass") -> str:
        return self.expect.get(check, default)


# ---------------------------------------------------------------------------
# section parsers
# ---------------------------------------------------------------------------

def _chart(sec: Mapping[str, str], where: str) -> Chart:
    if "coords" not in sec:
        raise ManifestError(f"[{where}] needs a coords entry")
    coords = _split(sec["coords"])
    bounds = []
    for c in coords:
        if c not in sec:
            raise ManifestError(f"[{where}] gives no interval for coordinate {c}")
        parts = _split(sec[c])
        if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "periodic"):
            raise ManifestError(f"[{where}] {c}: expected 'lo, hi' or 'lo, hi, periodic'")
        bounds.append((_number(parts[0], f"[{where}] {c}"), _number(parts[1], f"[{where}] {c}"),
                       len(parts) == 3))
    excluded = []
    if "exclude" in sec:
        for m in re.finditer(r"\(([^)]*)\)", sec["exclude"]):
            excluded.append(tuple(_number(p, f"[{where}] exclude") for p in _split(m.group(1))))
    try:
        return Chart.box(coords, bounds, excluded)
    except ValueError as exc:
        raise ManifestError(f"[{where}]: {exc}") from None


def _matrix(sec: Mapping[str, str], coords, prefix: str, where: str, default_identity=False):
    n = len(coords)
    idx = {c: i for i, c in enumerate(coords)}
    given: dict = {}
    for key, val in sec.items():
        m = _ENTRY.match(key)
        if not m or m.group(1) != prefix or m.group(3) is None:
            continue
        i, j = m.group(2), m.group(3)
        if i not in idx or j not in idx:
            raise ManifestError(f"[{where}] {key}: unknown coordinate")
        given[(idx[i], idx[j])] = _expr(val, f"[{where}] {key}")
    out = [[Const(1.0 if (default_identity and i == j) else 0.0) for j in range(n)] for i in range(n)]
    for (i, j), e in given.items():
        out[i][j] = e
        if (j, i) not in given:
            out[j][i] = e
    return tuple(tuple(r) for r in out)


def _vector(sec: Mapping[str, str], coords, prefix: str, where: str):
    out = []
    for c in coords:
        key = f"{prefix}({c})"
        out.append(_expr(sec[key], f"[{where}] {key}") if key in sec else Const(0.0))
    return tuple(out)


def _raw_operator(sec: Mapping[str, str], chart: Chart, where: str) -> ParabolicOperator:
    coords = chart.coords
    b2 = _matrix(sec, coords, "b2", where)
    c2 = _matrix(sec, coords, "c2", where)
    b1 = _vector(sec, coords, "b1", where)
    q = _expr(sec["q"], f"[{where}] q") if "q" in sec else Const(0.0)
    return ParabolicOperator(chart, b2, c2, b1, q)


def _sheet(sec: Mapping[str, str], coords, where: str) -> tuple:
    missing = [c for c in coords if c not in sec]
    if missing:
        raise ManifestError(f"[{where}] gives no expression for {', '.join(missing)}")
    return tuple(_expr(sec[c], f"[{where}] {c}") for c in coords)


def _bc(text: str, where: str) -> BoundaryCondition:
    parts = _split(text)
    kind = parts[0]
    if kind not in ("periodic", "dirichlet", "neumann"):
        raise ManifestError(f"{where}: unknown boundary condition {kind!r}")
    value = _expr(parts[1], where) if len(parts) > 1 else Const(0.0)
    return BoundaryCondition(kind, value)


def _canonical(sec: Mapping[str, str]) -> CanonicalMorphismSpec:
    case = sec.get("case", "generic").strip()
    try:
        return CanonicalMorphismSpec(
            case,
            beta=_expr(sec.get("beta", "1"), "[canonical] beta"),
            lam=_number(sec.get("lambda", "1"), "[canonical] lambda"),
            q0=_number(sec.get("q0", "0"), "[canonical] q0"),
            q1=_number(sec.get("q1", "0"), "[canonical] q1"),
            a0=_number(sec.get("a0", "1"), "[canonical] a0"),
        )
    except ValueError as exc:
        raise ManifestError(f"[canonical]: {exc}") from None


# ---------------------------------------------------------------------------
# top level
# ---------------------------------------------------------------------------

def parse_manifest(text: str, path: Path | None = None) -> Fixture:
    """Parse manifest text into a :class:`Fixture` and validate its invariants.

    Raises :class:`ManifestError` for syntax problems and unresolved names and
    :class:`InvariantError` when a declared object violates its invariants.
    """
    if not text.strip():
        raise ManifestError("empty manifest")
    cp = configparser.ConfigParser(delimiters=("=",), interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ManifestError(f"malformed manifest: {exc}") from None
    secs = {name: dict(cp[name]) for name in cp.sections()}
    head = secs.get("fixture", {})
    name = head.get("name", path.stem if path else "manifest").strip()
    if "chart" not in secs:
        raise ManifestError("manifest has no [chart] section")
    chart = _chart(secs["chart"], "chart")

    metric = None
    if "metric" in secs:
        metric = MetricField(chart, _matrix(secs["metric"], chart.coords, "g", "metric"))
    printed_metric = None
    if "printed.metric" in secs:
        printed_metric = MetricField(chart, _matrix(secs["printed.metric"], chart.coords, "g", "printed.metric"))

    canonical = _canonical(secs["canonical"]) if "canonical" in secs else None
    operator, kind = None, ""
    if "operator" in secs:
        sec = secs["operator"]
        kind = sec.get("kind", "laplace").strip()
        if kind in ("laplace", "heat", "canonical") and metric is None:
            raise ManifestError(f"operator kind {kind!r} needs a [metric] section")
        if kind == "laplace":
            operator = laplace_beltrami(metric)
        elif kind == "heat":
            operator = heat_operator(metric, _expr(sec.get("a", "1"), "[operator] a"),
                                     _expr(sec.get("q", "0"), "[operator] q"))
        elif kind == "raw":
            operator = _raw_operator(sec, chart, "operator")
        elif kind == "canonical":
            if canonical is None:
                raise ManifestError("operator kind 'canonical' needs a [canonical] section")
            operator = canonical_operator_D(canonical, metric)
        else:
            raise ManifestError(f"unknown operator kind {kind!r}")
    printed = _raw_operator(secs["printed"], chart, "printed") if "printed" in secs else None

    target = _chart(secs["target"], "target") if "target" in secs else None
    fibering = None
    if "map" in secs:
        if target is None:
            raise ManifestError("[map] needs a [target] chart")
        comps = _sheet(secs["map"], target.coords, "map")
        try:
            fmap = SmoothMap(chart, target, comps)
        except ValueError as exc:
            raise ManifestError(f"[map]: {exc}") from None
        fsec = secs.get("fiber")
        if fsec is None:
            raise ManifestError("[map] needs a [fiber] parametrization")
        params = _split(fsec.get("params", ""))
        fiber_chart = None
        if params:
            fiber_chart = _chart({"coords": fsec["params"], **{p: fsec.get(f"range.{p}", "") for p in params}},
                                 "fiber")
        sheets = [_sheet(fsec, chart.coords, "fiber")]
        k = 2
        while f"fiber.{k}" in secs:
            sheets.append(_sheet(secs[f"fiber.{k}"], chart.coords, f"fiber.{k}"))
            k += 1
        try:
            fibering = Fibering(fmap, fiber_chart, tuple(sheets))
        except ValueError as exc:
            raise ManifestError(f"[fiber]: {exc}") from None
    expected = None
    if "expected" in secs:
        if target is None:
            raise ManifestError("[expected] needs a [target] chart")
        expected = _raw_operator(secs["expected"], target, "expected")

    solver = _solver(secs["solver"], chart, target) if "solver" in secs else None
    connection = _connection(secs, chart) if "connection" in secs else None

    classify = []
    extra = []
    for sname, sec in secs.items():
        if sname.startswith("classify."):
            rng = _split(sec.get("range", "0.5, 2"))
            classify.append(ClassifySpec(sname.split(".", 1)[1], _expr(sec["a"], f"[{sname}] a"),
                                         (_number(rng[0], sname), _number(rng[1], sname)),
                                         sec.get("expect", "").strip()))
        elif sname.startswith("invariance."):
            T = _sheet(sec, chart.coords, sname)
            extra.append(CheckSpec(sname, "invariance", {"T": T}, sec.get("expect", "pass").strip()))
        elif sname.startswith("quotient."):
            extra.append(CheckSpec(sname, "quotient", {
                "map": _exprs(sec["map"], f"[{sname}] map"),
                "T": _exprs(sec["transform"], f"[{sname}] transform")}, sec.get("expect", "pass").strip()))
        elif sname.startswith("conformal"):
            extra.append(CheckSpec(sname, "conformal", {
                "map": _exprs(sec["map"], f"[{sname}] map"),
                "lambda": _expr(sec["lambda"], f"[{sname}] lambda")}, sec.get("expect", "pass").strip()))
        elif sname.startswith("theta"):
            extra.append(CheckSpec(sname, "theta", {"eta": _exprs(sec["eta"], f"[{sname}] eta")},
                                   sec.get("expect", "pass").strip()))
    checks = secs.get("checks", {})
    expect = {k[len("expect."):]: v.strip() for k, v in checks.items() if k.startswith("expect.")}
    tolerances = {k[len("tol."):]: _number(v, f"[checks] {k}") for k, v in checks.items() if k.startswith("tol.")}

    fx = Fixture(name, head.get("version", "1").strip(), head.get("description", "").strip(), chart, metric,
                 operator, kind, target, fibering, expected, printed, printed_metric, solver, connection,
                 canonical, classify, extra, expect, tolerances, path, text)
    validate(fx)
    return fx


def _solver(sec: Mapping[str, str], chart: Chart, target: Chart | None) -> SolverSpec:
    if target is None:
        raise ManifestError("[solver] needs a [target] chart")
    for key in ("ic", "T"):
        if key not in sec:
            raise ManifestError(f"[solver] needs {key}")
    nodes = {c: int(_number(sec[f"nodes.{c}"], f"[solver] nodes.{c}")) for c in target.coords
             if f"nodes.{c}" in sec}
    if set(nodes) != set(target.coords):
        raise ManifestError("[solver] needs nodes.<axis> for every target axis")
    xnodes = {c: int(_number(sec[f"xnodes.{c}"], f"[solver] xnodes.{c}")) for c in chart.coords
              if f"xnodes.{c}" in sec}
    if set(xnodes) != set(chart.coords):
        raise ManifestError("[solver] needs xnodes.<axis> for every source axis")
    refine = tuple(_split(sec.get("refine", ",".join(c for c in chart.coords if c in target.coords))))
    bcs = {k[3:]: _bc(v, f"[solver] {k}") for k, v in sec.items() if k.startswith("bc.")}
    return SolverSpec(
        ic=_expr(sec["ic"], "[solver] ic"),
        T=_number(sec["T"], "[solver] T"),
        nodes=nodes, xnodes=xnodes, refine=refine, bcs=bcs,
        lift=_expr(sec.get("lift", "v"), "[solver] lift"),
        u_map=_expr(sec.get("u_map", "u"), "[solver] u_map"),
        control=_expr(sec["control"], "[solver] control") if "control" in sec else None,
        threshold=_number(sec.get("threshold", "1e-3"), "[solver] threshold"),
    )


def _connection(secs: dict, chart: Chart) -> ConnectionSpec:
    sec = secs["connection"]
    if "base" not in secs:
        raise ManifestError("[connection] needs a [base] chart")
    base = _chart(secs["base"], "base")
    for key in ("eta", "projection", "section"):
        if key not in sec:
            raise ManifestError(f"[connection] needs {key}")
    rng = _split(sec.get("range", "-1, 1"))
    spec = ConnectionSpec(
        base=base,
        eta=_exprs(sec["eta"], "[connection] eta"),
        projection=_exprs(sec["projection"], "[connection] projection"),
        section=_exprs(sec["section"], "[connection] section"),
        param=sec.get("param", "s").strip(),
        topology=sec.get("topology", "line").strip(),
        fiber_range=(_number(rng[0], "[connection] range"), _number(rng[1], "[connection] range")),
        perturb=_exprs(sec["perturb"], "[connection] perturb") if "perturb" in sec else None,
        expect_H=_number(sec["expect.H"], "[connection] expect.H") if "expect.H" in sec else None,
        expect_decompose=sec.get("expect.decompose", "pass").strip(),
    )
    if "expect.flat" in sec:
        spec.expect_curvature_zero = sec["expect.flat"].strip() == "yes"
    for sname, s in secs.items():
        if sname.startswith("generator."):
            spec.generators.append(GeneratorSpec(sname.split(".", 1)[1], _exprs(s["map"], f"[{sname}] map"),
                                                 s.get("expect", "").strip() or None))
        elif sname.startswith("loop."):
            spec.loops.append((sname.split(".", 1)[1], _exprs(s["path"], f"[{sname}] path")))
    return spec


def validate(fx: Fixture, seed: int = 42) -> None:
    """Check declared objects against their invariants; raise :class:`InvariantError`."""
    pts = fx.chart.sample(200, seed=seed)
    if fx.metric is not None:
        bad = fx.metric.symmetry_defects(pts)
        if bad:
            i, j, gap = bad[0]
            raise InvariantError(f"metric entry g({i},{j}) differs from g({j},{i}) (gap {gap:.3g})")
        try:
            fx.metric.check(pts)
        except MetricError as exc:
            raise InvariantError(str(exc)) from None
    if fx.operator is not None:
        try:
            fx.operator.validate(pts, u_values=(0.5, 1.0, 2.0) if fx.operator.depends_on("u") else (0.0,))
        except ValueError as exc:
            raise InvariantError(f"operator: {exc}") from None
    if fx.fibering is not None:
        try:
            fx.fibering.check(seed=seed)
        except ValueError as exc:
            raise InvariantError(f"fibering: {exc}") from None
    if fx.connection is not None:
        spec = fx.connection
        for name in ("eta", "section"):
            if len(getattr(spec, name)) != fx.chart.dim:
                raise ManifestError(f"[connection] {name} needs {fx.chart.dim} components")
        if len(spec.projection) != spec.base.dim:
            raise ManifestError(f"[connection] projection needs {spec.base.dim} components")
        for gen in spec.generators:
            if len(gen.components) != spec.base.dim:
                raise ManifestError(f"[generator.{gen.name}] needs {spec.base.dim} components")
        for lname, comps in spec.loops:
            if len(comps) != spec.base.dim:
                raise ManifestError(f"[loop.{lname}] needs {spec.base.dim} components")


def read_manifest(path) -> Fixture:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc}") from None
    return parse_manifest(text, path)
