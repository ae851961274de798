import numpy as np
import pytest

from graspplan.model import default_model
from graspplan.planner import plan_three_phases
from graspplan.scenario import nominal


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def scenario():
    return nominal()


@pytest.fixture(scope="session")
def nominal_plan(scenario):
    return plan_three_phases(scenario, scenario.object_pose)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_q(rng, model, scale=0.9):
    return rng.uniform(-scale, scale, 7) * model.limits.q_max
