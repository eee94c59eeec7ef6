from fractions import Fraction

import numpy as np
import pytest

from mfctmdp import (
    ActionGrid,
    EmpiricalMeasure,
    ModelSpec,
    RelaxedControlPath,
    StateSpace,
    lift_policy,
    measure_transition,
    round_measure,
    validate_assumptions,
)
from mfctmdp.errors import EmptySourceState, InvalidParameter, SameState
from mfctmdp.model import check_profile, default_probe_grid, lattice_points

from conftest import birth_death


def test_measure_transition_small():
    assert measure_transition(EmpiricalMeasure((2, 0)), 0, 1).counts == (1, 1)


def test_measure_transition_resource_counts():
    mu = EmpiricalMeasure((500, 100, 100, 0, 500, 100, 100, 0))
    assert measure_transition(mu, 0, 1).counts == (499, 101, 100, 0, 500, 100, 100, 0)
    assert measure_transition(mu, 0, 1).N == 1400


def test_measure_transition_errors():
    with pytest.raises(EmptySourceState):
        measure_transition(EmpiricalMeasure((0, 5)), 0, 1)
    with pytest.raises(SameState):
        measure_transition(EmpiricalMeasure((3, 5)), 1, 1)


def test_round_measure_largest_remainder():
    assert round_measure([5 / 14, 1 / 14, 1 / 14, 0, 5 / 14, 1 / 14, 1 / 14, 0], 1400).counts == (500, 100, 100, 0, 500, 100, 100, 0)
    c = round_measure([1 / 3, 1 / 3, 1 / 3], 10).counts
    assert sum(c) == 10 and sorted(c) == [3, 3, 4]
    rng = np.random.default_rng(0)
    assert sum(round_measure([0.2, 0.8], 50, "stochastic", rng).counts) == 50


def test_validate_machine_replacement(mr):
    rep = validate_assumptions(mr)
    assert rep.ok and rep.q_max == 2.0


def test_validate_sir(sir):
    rep = validate_assumptions(sir)
    assert rep.ok and rep.q_max == pytest.approx(1.2, abs=1e-12)


def test_validate_row_sum_violation():
    bad = ModelSpec.from_functions("bad", (0, 1), ((0,), (0,)), lambda i, a, m: np.array([-1.0, 1.1]) if i == 0 else np.array([1.0, -1.0]),
                                   lambda i, a, m: 0.0)
    rep = validate_assumptions(bad)
    assert not rep.q2_ok and rep.worst_row_sum == pytest.approx(0.1)
    assert rep.q1_ok


def test_validate_negative_offdiag():
    bad = ModelSpec.from_functions("bad", (0, 1), ((0,), (0,)), lambda i, a, m: np.array([1.0, -1.0]), lambda i, a, m: 0.0)
    rep = validate_assumptions(bad)
    assert not rep.q1_ok and not rep.ok


def test_lift_policy_examples():
    W = lift_policy([[1, 0], [0, 1]], [0, 0], 2)
    assert np.allclose(W[0], [0.5, 0.5])
    same = lift_policy([[0.3, 0.7]] * 4, [1, 1, 0, 1], 2)
    assert np.allclose(same, [[0.3, 0.7], [0.3, 0.7]])
    F = Fraction
    W = lift_policy([[F(1), F(0)], [F(1), F(0)], [F(0), F(1)]], [0, 0, 0], 2)
    assert W[0, 0] == F(2, 3) and W[0, 1] == F(1, 3) and sum(W[0]) == 1


def test_lift_policy_empty_state_requested():
    with pytest.raises(EmptySourceState):
        lift_policy([[1.0]], [0], 2, states=[1])


def test_action_grid_and_dirac():
    g = ActionGrid(((0,), (0, 1)))
    assert g.mask.tolist() == [[True, False], [True, True]]
    assert g.dirac({1: 1}).tolist() == [[1.0, 0.0], [0.0, 1.0]]
    with pytest.raises(InvalidParameter):
        StateSpace((1, 1))


def test_check_profile_rejects_inadmissible(mr):
    with pytest.raises(InvalidParameter):
        check_profile(mr, [[0.5, 0.5], [1.0, 0.0]])


def test_relaxed_control_path():
    W0 = np.array([[1.0, 0.0], [1.0, 0.0]])
    W1 = np.array([[1.0, 0.0], [0.5, 0.5]])
    p = RelaxedControlPath.from_segments([(0.0, W0), (1.0, W1), (2.0, W0)], 3.0)
    assert p.n_segments == 3
    assert np.allclose(p.at(1.5), W1) and np.allclose(p.at(2.0), W0)
    assert np.allclose(p.switch_times(), [1.0, 2.0])
    assert p.restricted(1.5).n_segments == 2
    with pytest.raises(InvalidParameter):
        RelaxedControlPath([0.0, 1.0], np.stack([W0, W0]), 1.0)
    with pytest.raises(InvalidParameter):
        RelaxedControlPath([0.0], np.array([[[0.6, 0.6], [1.0, 0.0]]]), 1.0)


def test_lattice_points_and_probe_grid():
    pts = list(lattice_points(8, 3))
    assert len(pts) == 45 and all(sum(p) == 8 for p in pts)
    grid = default_probe_grid(3)
    assert all(abs(g.sum() - 1) < 1e-15 for g in grid)


def test_model_spec_guards():
    with pytest.raises(InvalidParameter):
        birth_death(beta=0.0)
    m = birth_death(beta=0.5)
    assert m.q_max == 2.0 and m.replace(beta=2.0).beta == 2.0
