from __future__ import annotations

from pathlib import Path

import pytest

from refdel.trainer import Trainer, TrainingProgram

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"

CRITERIA = {
    1: "determinism across worker counts",
    2: "re-execution bound",
    3: "soundness sweep",
    4: "referee economy",
    5: "phase-1 exactness",
    6: "numerical correctness",
    7: "commitment integrity",
    8: "multiparty",
}

_results: dict[int, list[bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


def pytest_runtest_logreport(report):
    num = getattr(report, "criterion", None)
    if num is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _results.setdefault(num, []).append(report.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for num, title in CRITERIA.items():
        got = _results.get(num)
        if got is None:
            status = "NOT RUN"
        else:
            status = "PASS" if all(got) else "FAIL"
        terminalreporter.write_line(f"criterion {num} ({title}): {status}")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def sgd_program() -> TrainingProgram:
    return TrainingProgram.load(FIXTURES / "mlp_small_sgd.prog")


@pytest.fixture(scope="session")
def sgd_reference(sgd_program) -> Trainer:
    t = Trainer("ref", sgd_program)
    t.train()
    return t
