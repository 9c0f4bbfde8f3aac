import copy
import json
from importlib import resources

import pytest

from fdbsde.scenario import builtin_scenario, scenario_from_dict
from fdbsde.solver import solve_chain


def raw_scenario(name):
    return json.loads((resources.files("fdbsde") / "data" / f"{name}.json").read_text())


def variant(name, **edits):
    """Bundled scenario with top-level or dotted-path fields replaced."""
    raw = copy.deepcopy(raw_scenario(name))
    for key, val in edits.items():
        node = raw
        parts = key.split("__")
        for p in parts[:-1]:
            node = node[int(p)] if isinstance(node, list) else node[p]
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = val
        else:
            node[last] = val
    return scenario_from_dict(raw)


def zero_market(name="flat", weight=0.0, grid_points=64):
    """alpha = beta = 0 in every regime and loss mass `weight`."""
    raw = copy.deepcopy(raw_scenario(name))
    for mk in raw["market"]:
        mk["alpha"] = [0.0] * raw["d"]
        mk["beta"] = [0.0] * raw["m"]
    raw["marks"]["weights"] = [[weight]] * raw["m"]
    raw["grid"]["points"] = grid_points
    return scenario_from_dict(raw)


@pytest.fixture(scope="session")
def flat():
    return builtin_scenario("flat")


@pytest.fixture(scope="session")
def curved():
    return builtin_scenario("curved")


@pytest.fixture(scope="session")
def flat_solution(flat):
    return solve_chain(flat, flat.rho)


@pytest.fixture(scope="session")
def curved_solution(curved):
    return solve_chain(curved, curved.rho, newton=True)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
