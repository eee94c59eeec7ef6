import numpy as np
import pytest

from mfctmdp import registry_get, validate_assumptions
from mfctmdp.errors import InvalidParameter, UnknownModel
from mfctmdp.models import MODEL_NAMES, fluid_priority, fluid_priority_theta, initial_measure, priority_feedback


def test_machine_replacement_defaults(mr):
    p = mr.params
    assert (p["C"], p["g"], p["lambda_wb"], p["lambda_bw"], p["T"], p["beta"]) == (1.0, 2.0, 1.0, 2.0, 4.0, 0.0)


def test_sir_defaults(sir):
    p = sir.params
    assert (p["lambda_SI"], p["lambda_SR"], p["lambda_IR"], p["a_bar"], p["T"]) == (0.6, 0.2, 0.2, 1.0, 10.0)
    assert len(sir.actions.per_state[1]) == 101


def test_resource_defaults(rc):
    p = rc.params
    assert p["lambda_1"] == p["lambda_5"] == 1.0
    assert p["lambda_2"] == p["lambda_6"] == 6.0
    assert p["lambda_3"] == p["lambda_7"] == 1.5


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_builtins_pass_validation(name):
    assert validate_assumptions(registry_get(name, {})).ok


def test_registry_errors():
    with pytest.raises(UnknownModel):
        registry_get("nope")
    with pytest.raises(InvalidParameter):
        registry_get("machine_replacement", {"lambda_bw": -1})
    with pytest.raises(InvalidParameter):
        registry_get("machine_replacement", {"unknown": 1})
    with pytest.raises(InvalidParameter):
        registry_get("machine_replacement", {"repair_cost": "weird"})
    assert not validate_assumptions(registry_get("machine_replacement", {"lambda_bw": -1}, strict=False)).ok


def test_machine_replacement_rates(mr):
    Q = mr.rate_tensor(np.array([0.3, 0.7]))
    assert Q[0, 0].tolist() == [-1.0, 1.0]
    assert Q[1, 0].tolist() == [0.0, 0.0]  # do nothing: broken stays broken
    assert Q[1, 1].tolist() == [2.0, -2.0]


def test_sir_rates(sir):
    mu = np.array([0.5, 0.3, 0.1, 0.1])
    Q = sir.rate_tensor(mu)
    a_idx = 50  # a = 0.5
    assert Q[0, 0, 1] == pytest.approx(0.6 * 0.3)
    assert Q[0, 0, 3] == pytest.approx(0.2)
    assert Q[1, a_idx, 2] == pytest.approx(0.5)
    assert Q[1, a_idx, 3] == pytest.approx(0.2)
    assert np.allclose(Q[sir.actions.mask].sum(axis=1), 0.0)


def test_cube_root_rates(cube):
    assert cube.rate_tensor(np.array([0.0, 1.0]))[1, 0, 0] == 0.0
    q = cube.rate_tensor(np.array([0.125, 0.875]))[1, 0, 0]
    assert q == pytest.approx(0.5 / 0.875)
    capped = cube.rate_tensor(np.array([0.995, 0.005]))[1, 0, 0]
    assert capped == pytest.approx(0.99 ** (1 / 3) / 0.01)


def test_initial_measures(sir, rc):
    assert np.allclose(initial_measure(sir), [0.99, 0.01, 0, 0])
    assert initial_measure(rc).sum() == pytest.approx(1.0)


def test_priority_feedback_blocks_other_line(rc):
    theta = np.array([1e-4])
    counts = np.array([500, 100, 100, 0, 500, 100, 100, 0])
    W = priority_feedback(counts, 1400, theta)
    assert W[6, 1] == 1.0 and W[1, 1] == 0.0  # state 7 served, state 2 blocked
    assert W[2, 1] == 1.0 and W[5, 1] == 0.0  # state 3 served, state 6 blocked
    counts = np.array([500, 100, 100, 0, 500, 100, 0, 100])
    W = priority_feedback(counts, 1400, theta)
    assert W[1, 1] == 1.0


def test_fluid_priority_shares_sum_to_one(rc):
    theta = fluid_priority_theta(rc)
    for mu in (initial_measure(rc), np.array([0.3, 0.2, 1e-5, 0.1, 0.3, 0.1, 2e-5, 0.0])):
        mu = mu / mu.sum()
        W = fluid_priority(mu, theta)
        assert W[6, 1] + W[1, 1] == pytest.approx(1.0)
        assert W[2, 1] + W[5, 1] == pytest.approx(1.0)
        assert np.allclose(W.sum(axis=1), 1.0)
