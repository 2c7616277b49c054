"""Command-line entry point.

Exit codes: 0 when the requested checks pass, 1 on a mathematical failure
(invariant violated, operator not projectible, residual too large, lift
verdict contrary to the manifest), 2 on usage or parse errors.

Each command prints a human-readable summary and writes ``report.txt``
(one ``key = value`` per line) into the output directory, next to any
coefficient tables.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checks import (CheckResult, UsageError, classify_checks, control_check, liftcheck_checks, printed_checks,
                     reduce_check, validation_checks, verify_check)
from .connection import ConnectionError
from .corpus import CorpusError, run_all
from .expr import DomainError, ParseError, parse
from .manifest import InvariantError, ManifestError, read_manifest
from .operators import ClassificationError, classify_diffusivity
from .solver import BlowUpError, SolverError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def _out_dir(args, name: str) -> Path:
    out = Path(args.out) if args.out else Path("parafactor-out") / name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(path: Path, header: dict, results: list[CheckResult]) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in header.items()]
    for r in results:
        lines.append(f"{r.name}.outcome = {r.outcome}")
        lines.append(f"{r.name}.expected = {r.expected}")
        if r.witness is not None:
            lines.append(f"{r.name}.witness = {_fmt(r.witness)}")
        for k, v in r.values.items():
            lines.append(f"{r.name}.{k} = {_fmt(v)}")
    path.write_text("\n".join(lines) + "\n")


def _header(args, command: str, fixture: str) -> dict:
    return {"command": command, "fixture": fixture, "version": __version__, "seed": args.seed,
            "tol_scale": args.tol_scale}


def _print(results: list[CheckResult]) -> None:
    for r in results:
        print(r.line())


def _write_tables(rep, directory: Path) -> list[Path]:
    """One CSV per reduced coefficient: grid coordinates then one column per u sample."""
    grid = rep.grid
    pts = grid.points().reshape(-1, grid.dim)
    written = []
    for name, table in rep.tables.items():
        stem = name.replace("[", "_").replace("]", "").replace(",", "_")
        path = directory / f"{stem}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(grid.chart.coords) + [f"u={_fmt(u)}" for u in rep.u_values])
            flat = table.reshape(len(rep.u_values), -1)
            for k, p in enumerate(pts):
                w.writerow([_fmt(c) for c in p] + [_fmt(v) for v in flat[:, k]])
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_check(args) -> int:
    fx = read_manifest(args.manifest)
    results = validation_checks(fx, args.seed) + printed_checks(fx, args.seed)
    _print(results)
    _write_report(_out_dir(args, fx.name) / "report.txt", _header(args, "check", fx.name), results)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_reduce(args) -> int:
    fx = read_manifest(args.manifest)
    result, rep = reduce_check(fx, args.seed, args.tol_scale)
    _print([result])
    out = _out_dir(args, fx.name)
    if rep is not None and rep.projectible and rep.tables:
        result.values["tables"] = " ".join(p.name for p in _write_tables(rep, out))
    _write_report(out / "report.txt", _header(args, "reduce", fx.name), [result])
    return EXIT_OK if result.outcome == "pass" else EXIT_FAIL


def cmd_verify(args) -> int:
    fx = read_manifest(args.manifest)
    lift = parse(args.lift) if args.lift else None
    try:
        result = verify_check(fx, args.refinements, args.snapshots, args.tol_scale, lift=lift, seed=args.seed)
    except BlowUpError as exc:
        result = CheckResult("verify", "fail", "pass", None, str(exc))
    results = [result]
    if lift is None:
        ctrl = control_check(fx, args.snapshots, args.tol_scale)
        if ctrl is not None:
            results.append(ctrl)
    _print(results)
    for k in range(args.refinements):
        if f"level{k}.grid" in result.values:
            v = result.values
            print(f"  level {k}: grid {v[f'level{k}.grid']}, h = {v[f'level{k}.h']:.4g}, "
                  f"residual max {v[f'level{k}.residual_max']:.3e}")
    if "order" in result.values:
        print(f"convergence order {result.values['order']:.3f}")
    _write_report(_out_dir(args, fx.name) / "report.txt", _header(args, "verify", fx.name), results)
    ok = result.outcome == "pass" and all(r.ok for r in results[1:])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_liftcheck(args) -> int:
    fx = read_manifest(args.manifest)
    results = liftcheck_checks(fx, args.seed, args.tol_scale)
    _print(results)
    _write_report(_out_dir(args, fx.name) / "report.txt", _header(args, "liftcheck", fx.name), results)
    return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL


def cmd_classify(args) -> int:
    target = Path(args.target)
    if target.suffix == ".ini" or target.is_file():
        fx = read_manifest(target)
        results = classify_checks(fx, args.tol_scale)
        if not results:
            raise UsageError(f"{target} declares no diffusivity laws")
        _print(results)
        _write_report(_out_dir(args, fx.name) / "report.txt", _header(args, "classify", fx.name), results)
        return EXIT_OK if all(r.ok for r in results) else EXIT_FAIL
    a = parse(args.target)
    lo, hi = args.range
    cls = classify_diffusivity(a, (lo, hi))
    print(cls)
    return EXIT_OK


def cmd_corpus(args) -> int:
    report = run_all(args.names or None, args.dir, seed=args.seed, tol_scale=args.tol_scale,
                     verify_hash=not args.no_verify_hash, refinements=args.refinements,
                     snapshots=args.snapshots)
    for line in report.lines():
        print(line)
    out = Path(args.out) if args.out else Path("parafactor-out") / "corpus"
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"seed = {args.seed}", f"tol_scale = {_fmt(args.tol_scale)}", f"fixtures = {len(report)}"]
    for f in report.fixtures:
        lines.append(f"{f.name}.passed = {_fmt(f.passed)}")
        if f.error:
            lines.append(f"{f.name}.error = {f.error}")
        for r in f.results:
            lines.append(f"{f.name}.{r.name} = {r.outcome} (expected {r.expected})")
    lines.append(f"passed = {_fmt(report.passed)}")
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK if report.passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42, help="sampling seed (default 42)")
    common.add_argument("--tol-scale", type=_positive, default=1.0, help="multiplies every threshold")
    common.add_argument("--snapshots", type=int, default=16, help="stored snapshots per solve")
    common.add_argument("--refinements", type=int, default=3, help="grid levels in the convergence study")
    common.add_argument("--out", help="directory for report.txt and tables (default parafactor-out/<fixture>)")
    common.add_argument("-v", "--verbose", action="store_true", help="log solver details")

    p = argparse.ArgumentParser(prog="parafactor", description="Factorization checks for parabolic equations.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("check", parents=[common], help="validate a manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_check)

    s = sub.add_parser("reduce", parents=[common], help="project the operator and tabulate the reduced one")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_reduce)

    s = sub.add_parser("verify", parents=[common], help="solve reduced, lift, and measure the residual")
    s.add_argument("manifest")
    s.add_argument("--lift", help="override the lift u = U(v, x), e.g. \"v + z\"")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("liftcheck", parents=[common], help="decide which base generators lift")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_liftcheck)

    s = sub.add_parser("classify", parents=[common], help="classify a diffusivity a(u)")
    s.add_argument("target", help="expression in u, or a manifest with classify sections")
    s.add_argument("--range", nargs=2, type=float, default=(0.5, 2.0), metavar=("LO", "HI"))
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("corpus", parents=[common], help="run every fixture of the corpus")
    s.add_argument("names", nargs="*", help="fixture names (default all)")
    s.add_argument("--dir", help="fixture directory (default the bundled corpus)")
    s.add_argument("--no-verify-hash", action="store_true", help="skip the digest check against the lock file")
    s.set_defaults(func=cmd_corpus)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ManifestError, ParseError, UsageError, CorpusError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvariantError, ClassificationError, ConnectionError, SolverError, DomainError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
