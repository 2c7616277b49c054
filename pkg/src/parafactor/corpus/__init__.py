"""Versioned, hash-pinned fixture manifests and a runner over all of them.

Fixtures live in ``fixtures/*.ini``; ``fixtures.lock`` pins each file by
name, version and SHA-256 digest.  :func:`load` refuses a fixture whose
bytes no longer match its pin, so results are reproducible given the seed.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..checks import CheckResult, UsageError, run_check_all
from ..manifest import Fixture, InvariantError, ManifestError, parse_manifest

__all__ = ["FIXTURE_DIR", "LOCK_NAME", "CorpusError", "FixtureReport", "CorpusReport",
           "fixture_names", "load", "read_lock", "write_lock", "run_all"]

FIXTURE_DIR = Path(__file__).parent / "fixtures"
LOCK_NAME = "fixtures.lock"


class CorpusError(LookupError):
    """Unknown fixture or a fixture that does not match its pin."""


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fixture_names(directory=None) -> list[str]:
    directory = Path(directory) if directory is not None else FIXTURE_DIR
    return sorted(p.stem for p in directory.glob("*.ini"))


def read_lock(directory=None) -> dict[str, tuple[str, str]]:
    """Map fixture name to (version, digest); empty when there is no lock file."""
    directory = Path(directory) if directory is not None else FIXTURE_DIR
    path = directory / LOCK_NAME
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, version, digest = line.split()
        out[name] = (version, digest)
    return out


def write_lock(directory=None) -> Path:
    """Pin every fixture in ``directory`` at its current bytes."""
    directory = Path(directory) if directory is not None else FIXTURE_DIR
    lines = ["# name version sha256"]
    for name in fixture_names(directory):
        data = (directory / f"{name}.ini").read_bytes()
        fx = parse_manifest(data.decode(), directory / f"{name}.ini")
        lines.append(f"{name} {fx.version} {_digest(data)}")
    path = directory / LOCK_NAME
    path.write_text("\n".join(lines) + "\n")
    return path


def load(name: str, directory=None, verify_hash: bool = True) -> Fixture:
    """Parse and validate a fixture by name.

    Raises :class:`CorpusError` when the fixture is missing or its digest or
    version disagrees with the lock file, and the manifest errors for parse
    or invariant failures.
    """
    directory = Path(directory) if directory is not None else FIXTURE_DIR
    path = directory / f"{name}.ini"
    if not path.exists():
        raise CorpusError(f"no fixture named {name!r} in {directory}")
    data = path.read_bytes()
    lock = read_lock(directory) if verify_hash else {}
    if verify_hash and lock:
        if name not in lock:
            raise CorpusError(f"fixture {name!r} is not pinned in {LOCK_NAME}")
        if lock[name][1] != _digest(data):
            raise CorpusError(f"fixture {name!r} does not match its pinned digest")
    fx = parse_manifest(data.decode(), path)
    if verify_hash and lock and lock[name][0] != fx.version:
        raise CorpusError(f"fixture {name!r} declares version {fx.version}, pinned {lock[name][0]}")
    return fx


@dataclass
class FixtureReport:
    name: str
    results: list = field(default_factory=list)
    error: str = ""
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.error and all(r.ok for r in self.results)

    def lines(self) -> list[str]:
        head = f"{self.name}: {'PASS' if self.passed else 'FAIL'} ({len(self.results)} checks)"
        out = [head]
        if self.error:
            out.append(f"  error: {self.error}")
        out += [f"  {r.line()}" for r in self.results]
        return out


@dataclass
class CorpusReport:
    fixtures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.fixtures)

    def __len__(self) -> int:
        return len(self.fixtures)

    def __getitem__(self, name: str) -> FixtureReport:
        for f in self.fixtures:
            if f.name == name:
                return f
        raise KeyError(name)

    def failed(self) -> list[str]:
        return [f.name for f in self.fixtures if not f.passed]

    def lines(self) -> list[str]:
        out = []
        for f in self.fixtures:
            out += f.lines()
        n_ok = sum(f.passed for f in self.fixtures)
        out.append(f"corpus: {n_ok}/{len(self.fixtures)} fixtures pass")
        return out


def run_all(names=None, directory=None, seed: int = 42, tol_scale: float = 1.0, verify_hash: bool = True,
            refinements: int = 3, snapshots: int = 16) -> CorpusReport:
    """Run every declared check of every fixture; failures become report entries."""
    names = fixture_names(directory) if names is None else list(names)
    report = CorpusReport()
    for name in names:
        start = time.perf_counter()
        entry = FixtureReport(name)
        try:
            fx = load(name, directory, verify_hash)
            entry.results = run_check_all(fx, seed=seed, tol_scale=tol_scale, refinements=refinements,
                                          snapshots=snapshots)
        except (CorpusError, ManifestError, InvariantError, UsageError, ArithmeticError, ValueError) as exc:
            entry.error = f"{type(exc).__name__}: {exc}"
        entry.elapsed = time.perf_counter() - start
        report.fixtures.append(entry)
    return report
