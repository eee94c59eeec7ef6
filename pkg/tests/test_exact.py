import itertools
import math

import numpy as np
import pytest

from mfctmdp import (
    OpenLoop,
    RelaxedControlPath,
    bellman_operator,
    enumerate_lattice,
    finite_horizon_solve,
    monte_carlo_value,
    objective_F,
    policy_evaluation,
    stationary_policy_value,
    value_iteration,
)
from mfctmdp.errors import CoupledActionsUnsupported, InvalidParameter, LatticeTooLarge, StepTooLarge, UndiscountedInfinite
from mfctmdp.exact import uniformization_rate
from mfctmdp.experiments import paper_machine_policy
from mfctmdp.grids import make_time_grid
from mfctmdp.models import initial_measure

from conftest import birth_death, frozen, two_action


def brute_force_bellman(model, N, v_by_counts):
    """Max over every deterministic product action, written without the lattice machinery."""
    S = model.n_states
    grids = model.actions.per_state
    lam = N * (S - 1) * model.q_max
    out = {}
    for c in v_by_counts:
        mu = np.array(c, dtype=float) / N
        Q, R = model.rate_tensor(mu), model.reward_tensor(mu)
        best = -math.inf
        for acts in itertools.product(*[range(len(g)) for g in grids]):
            total = sum(mu[i] * R[i, acts[i]] for i in range(S))
            for i in range(S):
                for j in range(S):
                    if i != j and c[i] > 0:
                        d = list(c)
                        d[i] -= 1
                        d[j] += 1
                        total += c[i] * Q[i, acts[i], j] * (v_by_counts[tuple(d)] - v_by_counts[c])
            best = max(best, (total + lam * v_by_counts[c]) / (model.beta + lam))
        out[c] = best
    return out


def test_lattice_sizes():
    lat = enumerate_lattice(2, 2)
    assert sorted(map(tuple, lat.points.tolist())) == [(0, 2), (1, 1), (2, 0)]
    assert enumerate_lattice(1000, 2).size == 1001
    assert enumerate_lattice(10, 4).size == math.comb(13, 3)
    with pytest.raises(LatticeTooLarge):
        enumerate_lattice(1000, 8)


def test_lattice_index_and_successors():
    lat = enumerate_lattice(6, 3)
    for p, c in enumerate(lat.points):
        assert lat.index(c) == p
    succ = lat.successors
    for p, c in enumerate(lat.points):
        for i in range(3):
            assert succ[p, i, i] == p
            for j in range(3):
                if i != j and c[i] > 0:
                    d = c.copy()
                    d[i] -= 1
                    d[j] += 1
                    assert lat.index(d) == succ[p, i, j]


@pytest.mark.parametrize("factory,N", [(two_action, 2), (two_action, 12), ("mr", 15), ("sir", 4)])
def test_bellman_matches_brute_force(factory, N, mr, sir):
    model = {"mr": mr, "sir": sir}.get(factory) if isinstance(factory, str) else factory()
    if model.beta == 0:
        model = model.replace(beta=0.7, horizon=math.inf)
    lat = enumerate_lattice(N, model.n_states)
    assert lat.size <= 1000
    v = np.random.default_rng(N).normal(size=lat.size)
    Tv, _ = bellman_operator(model, lat, v)
    oracle = brute_force_bellman(model, N, {tuple(int(x) for x in c): v[p] for p, c in enumerate(lat.points)})
    for p, c in enumerate(lat.points):
        assert Tv[p] == pytest.approx(oracle[tuple(int(x) for x in c)], abs=1e-12)


def test_bellman_zero_reward_fixed_point():
    m = birth_death(reward=(0.0, 0.0))
    lat = enumerate_lattice(3, 2)
    Tv, _ = bellman_operator(m, lat, np.zeros(lat.size))
    assert np.all(Tv == 0.0)


def test_bellman_requires_discount(mr):
    with pytest.raises(UndiscountedInfinite):
        bellman_operator(mr, enumerate_lattice(2, 2), np.zeros(3))


def test_static_problem_value():
    m = frozen(beta=0.5)
    vt = value_iteration(m, 4)
    for c, v in zip(vt.lattice.points, vt.values):
        mu = c / 4
        best = (mu[0] * 1.0 * 2 + mu[1] * 2.0 * 2) * (1 + mu[0])
        assert v == pytest.approx(best / 0.5, abs=1e-8)
    assert np.all(vt.policy[vt.lattice.points > 0] == 1)


def test_constant_reward_value():
    m = birth_death(reward=(3.0, 3.0), beta=2.0)
    vt = value_iteration(m, 5)
    assert np.allclose(vt.values, 1.5, atol=1e-9)


def test_birth_death_matches_linear_solve():
    lam, mu, beta = 1.0, 2.0, 1.0
    m = birth_death(lam, mu, beta, reward=(1.0, -0.5))
    vt = value_iteration(m, 2, tol=1e-13)
    # generator on counts (2,0), (1,1), (0,2) written by hand
    G = np.array([[-2 * lam, 2 * lam, 0.0], [mu, -(lam + mu), lam], [0.0, 2 * mu, -2 * mu]])
    r = np.array([1.0, 0.25, -0.5])
    v = np.linalg.solve(beta * np.eye(3) - G, r)
    for k, c in enumerate([(2, 0), (1, 1), (0, 2)]):
        assert vt.value_at(c) == pytest.approx(v[k], abs=1e-8)
    lin = stationary_policy_value(m, 2, m.actions.dirac())
    for k, c in enumerate([(2, 0), (1, 1), (0, 2)]):
        assert lin.value_at(c) == pytest.approx(v[k], abs=1e-12)


def test_value_iteration_monotone_in_reward():
    lo = value_iteration(two_action(), 6)
    base = two_action()
    hi_model = base.replace(rewards=lambda mu, th: base.rewards(mu, th) + 0.1 * (1 + mu[0]))
    hi = value_iteration(hi_model, 6)
    assert np.all(hi.values > lo.values)


def test_coupled_actions_rejected(rc):
    with pytest.raises(CoupledActionsUnsupported):
        finite_horizon_solve(rc, 2)


def test_finite_horizon_zero_model():
    m = birth_death(reward=(0.0, 0.0), beta=0.0, horizon=2.0)
    vt = finite_horizon_solve(m, 4)
    assert np.all(vt.values == 0.0)


def test_finite_horizon_short_horizon_returns_terminal():
    m = birth_death(beta=0.0, horizon=1e-4, reward=(0.0, 0.0)).replace(terminal=lambda mu, th: 2.0 * mu[0])
    vt = finite_horizon_solve(m, 4)
    assert np.allclose(vt.values, 2.0 * vt.lattice.fractions[:, 0], atol=1e-3)


def test_step_too_large(mr):
    with pytest.raises(StepTooLarge):
        finite_horizon_solve(mr, 50, make_time_grid(4.0, n_steps=10))


def test_finite_horizon_rk4_order():
    m = birth_death(beta=0.3, horizon=2.0, reward=(1.0, -0.5))
    vals = [finite_horizon_solve(m, 3, make_time_grid(2.0, n_steps=n)).values for n in (40, 80, 160)]
    ratio = np.max(np.abs(vals[0] - vals[1])) / np.max(np.abs(vals[1] - vals[2]))
    assert 8 <= ratio <= 32


def test_policy_evaluation_frozen_matches_quadrature():
    m = frozen(beta=0.5, horizon=3.0)
    W0 = np.array([[1.0, 0.0], [0.0, 1.0]])
    W1 = np.array([[0.5, 0.5], [1.0, 0.0]])
    ctrl = RelaxedControlPath.from_segments([(0.0, W0), (1.2, W1)], 3.0)
    vt = policy_evaluation(m, 4, OpenLoop(ctrl))
    for c, v in zip(vt.lattice.points, vt.values):
        mu = c / 4

        def rate(W):
            return sum(mu[i] * (1.0, 2.0)[i] * (1 + W[i] @ np.array([0.0, 1.0])) for i in range(2)) * (1 + mu[0])

        disc = lambda a, b: (math.exp(-0.5 * a) - math.exp(-0.5 * b)) / 0.5
        assert v == pytest.approx(rate(W0) * disc(0, 1.2) + rate(W1) * disc(1.2, 3.0), abs=1e-9)


def test_policy_value_below_optimal(mr):
    opt = finite_horizon_solve(mr, 20)
    pol = policy_evaluation(mr, 20, OpenLoop(paper_machine_policy(mr)))
    assert np.all(pol.values <= opt.values + 1e-9)


def test_policy_evaluation_matches_monte_carlo():
    m = two_action(beta=0.5, horizon=3.0)
    W = np.array([[0.3, 0.7], [0.6, 0.4]])
    ctrl = RelaxedControlPath.constant(W, 3.0)
    vt = policy_evaluation(m, 2, OpenLoop(ctrl))
    res = monte_carlo_value(m, 2, np.array([2, 0]), OpenLoop(ctrl), 2000, seed=8)
    assert abs(res.mean - vt.value_at([2, 0])) <= 3 * res.se


def test_policy_evaluation_rejects_jump_adapted(mr):
    from mfctmdp import JumpAdapted

    with pytest.raises(InvalidParameter):
        policy_evaluation(mr, 5, JumpAdapted(paper_machine_policy(mr)))


def test_finite_horizon_gap_shrinks_with_N(mr, mr_optimum):
    ref = mr_optimum.value
    gaps = [abs(finite_horizon_solve(mr, N).value_at([N, 0]) - ref) for N in (10, 25, 50, 100)]
    assert all(b < a for a, b in zip(gaps, gaps[1:]))


def test_value_table_csv(tmp_path):
    vt = value_iteration(birth_death(), 2)
    p = vt.to_csv(tmp_path / "v.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "n_0,n_1,value,action_0,action_1" and len(lines) == 4
    assert p.with_suffix(".json").exists()


def test_uniformization_rate(mr):
    assert uniformization_rate(mr, 10) == 10 * 1 * 2.0
