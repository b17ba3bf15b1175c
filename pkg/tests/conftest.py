from pathlib import Path

import pytest

from distbvnet.core import ScenarioConfig

DATA = Path(__file__).resolve().parents[1] / "src" / "distbvnet" / "data"


@pytest.fixture
def small_cfg() -> ScenarioConfig:
    return ScenarioConfig(n_vehicles=20, n_rsus=4, rounds=40, seed=3)


@pytest.fixture
def data_dir() -> Path:
    return DATA


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(RESULTS):
        ok, detail = RESULTS[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
