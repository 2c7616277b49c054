import shutil

import pytest

from parafactor.corpus import CorpusError, FIXTURE_DIR, fixture_names, load, read_lock, run_all, write_lock

EXPECTED = {
    "angular", "canonical-exponential", "canonical-power", "diffusivity", "euclid-identity", "example1",
    "example1-perturbed", "example2", "example3", "example4", "example5", "example5-doubled", "example6",
    "heisenberg-H03", "heisenberg-H1", "r3-orthogonal", "r3-rotation", "rotation-family", "trivial-fibering",
}


@pytest.fixture(scope="module")
def full_report():
    return run_all()


def test_corpus_contents_and_lock():
    names = set(fixture_names())
    assert EXPECTED <= names
    lock = read_lock()
    assert set(lock) == names
    assert all(len(digest) == 64 for _, digest in lock.values())


def test_load_by_name():
    fx = load("example1")
    assert fx.chart.dim == 4


def test_unknown_fixture():
    with pytest.raises(CorpusError, match="no fixture"):
        load("does-not-exist")


def test_tampered_fixture_rejected(tmp_path):
    shutil.copytree(FIXTURE_DIR, tmp_path / "fx")
    path = tmp_path / "fx" / "example4.ini"
    path.write_text(path.read_text() + "\n# edited\n")
    with pytest.raises(CorpusError, match="digest"):
        load("example4", tmp_path / "fx")
    assert load("example4", tmp_path / "fx", verify_hash=False).name == "example4"
    report = run_all(["example4"], tmp_path / "fx")
    assert not report.passed and "CorpusError" in report["example4"].error


def test_empty_directory(tmp_path):
    report = run_all(directory=tmp_path)
    assert len(report) == 0 and report.passed


def test_full_corpus_passes(full_report):
    assert full_report.passed, "\n".join(full_report.lines())
    assert {f.name for f in full_report.fixtures} == set(fixture_names())
    assert full_report.lines()[-1] == f"corpus: {len(full_report)}/{len(full_report)} fixtures pass"


def test_declared_failures_are_detected(full_report):
    outcomes = {(f.name, r.name): r.outcome for f in full_report.fixtures for r in f.results}
    assert outcomes[("example1-perturbed", "project")] == "fail"
    assert outcomes[("example5-doubled", "conformal")] == "fail"
    assert outcomes[("example2", "invariance.reflection")] == "fail"
    assert outcomes[("example2", "verify.control")] == "fail"
    assert outcomes[("example3", "check.printed_metric")] == "fail"
    assert outcomes[("heisenberg-H03", "lift.shift")] == "not-liftable"


def test_perturbing_example1_fails_only_example1(tmp_path):
    d = tmp_path / "fx"
    shutil.copytree(FIXTURE_DIR, d)
    path = d / "example1.ini"
    text = path.read_text()
    original = next(line for line in text.splitlines() if line.startswith("g(y,z)"))
    path.write_text(text.replace(original, 'g(y,z) = "x*exp(w) + 0.1*z"'))
    write_lock(d)
    report = run_all(directory=d)
    assert report.failed() == ["example1"]
    failing = [r for r in report["example1"].results if not r.ok]
    by_name = {r.name: r for r in failing}
    assert "project" in by_name
    assert by_name["project"].witness > 1e-2


def test_results_are_deterministic():
    a = run_all(["example4", "diffusivity", "example6"], seed=7)
    b = run_all(["example4", "diffusivity", "example6"], seed=7)
    assert a.lines() == b.lines()
