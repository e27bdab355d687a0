import time

import pytest

from stsparse.mesh import build_unit_cylinder, refine_uniform
from stsparse.optimize import adaptive_solve, solve
from stsparse.problems import example1_moving_target, example2_turning_wave

import criteria_log


def pytest_terminal_summary(terminalreporter):
    if not criteria_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(criteria_log.RESULTS):
        terminalreporter.write_line(criteria_log.RESULTS[k])


def _timed_solve(problem, mesh):
    t0 = time.perf_counter()
    system, state, report = solve(problem, mesh)
    return {"system": system, "state": state, "report": report, "mesh": mesh,
            "problem": problem, "time": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def example1_fine():
    """Example 1 at h = 1/16 (uniform refinement of the 8^3 grid, which is
    the same triangulation as the 16^3 grid), sparse and nonsparse."""
    mesh = refine_uniform(build_unit_cylinder(2, 8))
    return {
        "sparse": _timed_solve(example1_moving_target(), mesh),
        "nonsparse": _timed_solve(example1_moving_target(mu=0.0), mesh),
    }


@pytest.fixture(scope="session")
def example1_coarse_sparse():
    return _timed_solve(example1_moving_target(), build_unit_cylinder(2, 8))


@pytest.fixture(scope="session")
def example2_adaptive():
    t0 = time.perf_counter()
    hist = adaptive_solve(example2_turning_wave(sparse=True), build_unit_cylinder(2, 8),
                          steps=4, theta=0.5)
    return {"history": hist, "time": time.perf_counter() - t0}
