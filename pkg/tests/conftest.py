import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from radarlab import experiments as ex  # noqa: E402

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def lab():
    """The lab dataset and model, trained once per session."""
    ds = ex.lab_dataset()
    model = ex.lab_model(ds, seed=0)
    return model, ds


@pytest.fixture(scope="session")
def lab_profiles(lab):
    """100 PBFA rounds of 10 flips on the lab model, shared by every sweep."""
    model, ds = lab
    spec = ex.ExperimentSpec("profiles", rounds=100, n_bf=10, seed=0)
    return ex.pbfa_profiles(model, ds, spec)


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
