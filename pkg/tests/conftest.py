import math

import numpy as np
import pytest
from hypothesis import settings

from mfctmdp import ModelSpec, registry_get
from mfctmdp.limit import optimize_switching

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def birth_death(lam=1.0, mu=2.0, beta=1.0, reward=(1.0, 0.0), horizon=math.inf):
    """Uncontrolled two-state chain 0 <-> 1 with constant rates."""
    return ModelSpec.from_functions(
        "birth_death", (0, 1), ((0,), (0,)),
        intensity=lambda i, a, m: np.array([-lam, lam]) if i == 0 else np.array([mu, -mu]),
        reward=lambda i, a, m: reward[i],
        beta=beta, horizon=horizon,
    )


def two_action(beta=1.0, horizon=math.inf):
    """Two states, two actions each, rates and rewards depending on the measure and the action."""

    def q(i, a, m):
        up = 0.5 + a + m[1]
        down = 1.0 + 0.5 * a * m[0]
        return np.array([-up, up]) if i == 0 else np.array([down, -down])

    def r(i, a, m):
        return (1.0 + m[0] - 0.4 * a) if i == 0 else (0.3 * a * m[1] - 0.2)

    return ModelSpec.from_functions("two_action", (0, 1), ((0, 1), (0, 1)), q, r, beta=beta, horizon=horizon)


def frozen(rewards=(1.0, 2.0), beta=1.0, horizon=math.inf, terminal=None):
    """All rates zero; reward depends on state and action value."""
    return ModelSpec.from_functions(
        "frozen", (0, 1), ((0.0, 1.0), (0.0, 1.0)),
        intensity=lambda i, a, m: np.zeros(2),
        reward=lambda i, a, m: rewards[i] * (1.0 + a) * (1.0 + m[0]),
        terminal=terminal, beta=beta, horizon=horizon,
    )


@pytest.fixture(scope="session")
def mr():
    return registry_get("machine_replacement")


@pytest.fixture(scope="session")
def sir():
    return registry_get("sir_malware")


@pytest.fixture(scope="session")
def cube():
    return registry_get("cube_root")


@pytest.fixture(scope="session")
def rc():
    return registry_get("resource_competition")


@pytest.fixture(scope="session")
def mr_optimum(mr):
    """Three-phase optimum for machine replacement (slow: shared by all tests)."""
    return optimize_switching(mr, "three_phase")


@pytest.fixture(scope="session")
def sir_optimum(sir):
    return optimize_switching(sir, "one_switch")
