import numpy as np
import pytest

from meta_attack import env, policy as pol


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tab_task():
    return env.random_tabular_task(np.random.default_rng(0))


@pytest.fixture
def tab_params(tab_task):
    shape = env.policy_shape_for(tab_task, (3,))
    return pol.init_params(shape, np.random.default_rng(1))


@pytest.fixture
def nav_params():
    shape = pol.mlp_shape(2, 2, (8, 8))
    return pol.init_params(shape, np.random.default_rng(2), log_std=-0.5)




CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
