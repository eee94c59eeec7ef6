"""Property-based checks of the structural invariants."""
import math
from fractions import Fraction

import numpy as np
from hypothesis import given, strategies as st

from mfctmdp import EmpiricalMeasure, OpenLoop, RelaxedControlPath, bellman_operator, enumerate_lattice, lift_policy, measure_transition, registry_get, simulate
from mfctmdp.exact import uniformization_rate
from mfctmdp.limit import limit_rhs
from mfctmdp.model import default_probe_grid
from mfctmdp.models import MODEL_NAMES

from conftest import two_action

MODELS = {name: registry_get(name) for name in MODEL_NAMES}

counts_st = st.lists(st.integers(0, 50), min_size=2, max_size=6).filter(lambda c: sum(c) > 0)


def probability(n):
    return st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n).map(lambda v: np.array(v) / sum(v))


@given(counts_st, st.data())
def test_measure_transition_conserves_total(c, data):
    i = data.draw(st.sampled_from([k for k, x in enumerate(c) if x > 0]))
    j = data.draw(st.sampled_from([k for k in range(len(c)) if k != i]))
    mu = EmpiricalMeasure(tuple(c))
    nu = measure_transition(mu, i, j)
    assert nu.N == mu.N and nu.counts[i] == c[i] - 1 and nu.counts[j] == c[j] + 1


@given(st.lists(st.integers(0, 2), min_size=1, max_size=8), st.data())
def test_lift_policy_rational_sums(x, data):
    kernels = []
    for _ in x:
        w = data.draw(st.lists(st.integers(0, 5), min_size=3, max_size=3).filter(lambda v: sum(v) > 0))
        kernels.append([Fraction(v, sum(w)) for v in w])
    W = lift_policy(kernels, x, 3)
    for row in W:
        assert sum(row) == 1


@given(st.sampled_from(MODEL_NAMES), st.data())
def test_registered_models_q1_q2(name, data):
    m = MODELS[name]
    mu = data.draw(probability(m.n_states))
    Q = m.rate_tensor(mu)[m.actions.mask]
    rows = np.nonzero(m.actions.mask)[0]
    off = Q.copy()
    off[np.arange(len(rows)), rows] = 0.0
    assert off.min() >= 0.0
    assert np.max(np.abs(Q.sum(axis=1))) <= 1e-12


@given(st.sampled_from(MODEL_NAMES), st.data())
def test_limit_rhs_sums_to_zero(name, data):
    m = MODELS[name]
    mu = data.draw(probability(m.n_states))
    W = np.zeros(m.actions.mask.shape)
    for i, c in enumerate(m.actions.counts):
        W[i, :c] = data.draw(probability(int(c)))
    assert abs(limit_rhs(m, mu, W).sum()) <= 1e-12


@given(st.integers(1, 12), st.integers(0, 10_000))
def test_bellman_contraction(N, seed):
    m = two_action(beta=0.8)
    lat = enumerate_lattice(N, 2)
    rng = np.random.default_rng(seed)
    v, w = rng.normal(size=(2, lat.size)) * 5
    Tv, _ = bellman_operator(m, lat, v)
    Tw, _ = bellman_operator(m, lat, w)
    lam = uniformization_rate(m, N)
    assert np.max(np.abs(Tv - Tw)) <= lam / (m.beta + lam) * np.max(np.abs(v - w)) + 1e-12


@given(st.integers(2, 400), st.integers(0, 2**32 - 1))
def test_simulated_paths_stay_on_lattice(N, seed):
    m = MODELS["sir_malware"]
    ctrl = RelaxedControlPath.from_segments([(0.0, m.actions.dirac()), (3.0, m.actions.dirac({1: 1.0}))], m.horizon)
    tr = simulate(m, N, np.array([0.9, 0.1, 0.0, 0.0]), OpenLoop(ctrl), seed)
    assert np.all(tr.counts.sum(axis=1) == N) and np.all(tr.counts >= 0)
    steps = np.abs(np.diff(tr.counts, axis=0)).sum(axis=1)
    assert np.all((steps == 2) | (steps == 0))


@given(st.integers(1, 30), st.integers(2, 4))
def test_lattice_size_and_ranking(N, S):
    lat = enumerate_lattice(N, S)
    assert lat.size == math.comb(N + S - 1, S - 1)
    assert np.array_equal(lat.index(lat.points), np.arange(lat.size))


def test_probe_grid_includes_vertices():
    grid = default_probe_grid(3)
    for k in range(3):
        assert any(np.array_equal(g, np.eye(3)[k]) for g in grid)
