import json
from importlib import resources

import pytest

from contune.plantnet_sim import SimParams
from contune.problem import ObjectiveSpec, ProblemSpec, SearchSpace, Variable


def pool_space():
    return SearchSpace((
        Variable("http", "integer", 20, 60),
        Variable("download", "integer", 20, 60),
        Variable("extract", "integer", 3, 9),
        Variable("simsearch", "integer", 20, 60),
    ))


def calibrated_params():
    path = resources.files("contune") / "scenarios" / "plantnet_calibration.json"
    return SimParams.from_dict(json.loads(path.read_text())["params"])


@pytest.fixture
def space():
    return pool_space()


@pytest.fixture
def problem(space):
    return ProblemSpec(space, ObjectiveSpec("response_time_mean", "minimize"))


@pytest.fixture(scope="session")
def params():
    return calibrated_params()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
