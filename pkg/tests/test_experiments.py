import filecmp
import math

import numpy as np
import pytest

from mfctmdp import ModelSpec, RelaxedControlPath, registry_get
from mfctmdp.errors import InvalidParameter, UnknownExample
from mfctmdp.experiments import (
    equivalence_fixture,
    equivalence_study,
    feedback_nonconvergence_demo,
    joint_policy_value,
    nonuniqueness_demo,
    paper_machine_policy,
    rate_study,
    replicate_figures,
)


def _dirs_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    return not mismatch and not errors


def static_model():
    """No transitions; reward depends on the measure only."""
    return ModelSpec.from_functions("static", (0, 1, 2), ((0,), (0,), (0,)), lambda i, a, m: np.zeros(3),
                                    lambda i, a, m: m[0] * m[1] + m[2] ** 2, beta=0.0, horizon=1.0, params={"mu0": [0.3, 0.3, 0.4]})


def test_rate_study_static_model():
    m = static_model()
    ctrl = RelaxedControlPath.constant(m.actions.dirac(), 1.0)
    res = rate_study(m, ctrl, Ns=(7, 70, 700), mode="mc", replications=2)
    for N, g in zip(res.Ns, res.gaps):
        c = np.round(np.array([0.3, 0.3, 0.4]) * N)
        mu = c / c.sum()
        # the N-agent value is the reward at the rounded measure, exactly
        assert g == pytest.approx(abs(mu[0] * mu[1] + mu[2] ** 2 - 0.25), abs=1e-12)
    assert res.sqrt_n_gaps[-1] < res.sqrt_n_gaps[0]


def test_rate_study_exact_machine_replacement(tmp_path, mr):
    res = rate_study(mr, paper_machine_policy(mr), Ns=(10, 20), out_dir=tmp_path)
    assert res.mode == "exact" and res.standard_errors == [0.0, 0.0]
    assert res.gaps[-1] >= -1e-9
    assert (tmp_path / "study.json").exists() and (tmp_path / "rate_machine_replacement_10.csv").exists()


def test_rate_study_lattice_fallback(monkeypatch, mr):
    import mfctmdp.exact as ex

    monkeypatch.setattr(ex, "LATTICE_CAP", 15)
    res = rate_study(mr, paper_machine_policy(mr), Ns=(10, 20), replications=4)
    assert res.mode == "mixed" and len(res.notes) == 1


def test_rate_study_requires_finite_horizon():
    with pytest.raises(InvalidParameter):
        rate_study(equivalence_fixture(), None, Ns=(2,))


def test_equivalence_single_agent():
    rep = equivalence_study(N=1, replications=300, seed=2)
    assert rep["aggregation_max_error"] <= 1e-12
    assert rep["exact_gap"] <= 1e-10
    assert rep["joint_vs_measure_in_3se"]


def test_joint_value_permutation_invariant():
    from mfctmdp.experiments import _first_agent_rule

    v = joint_policy_value(equivalence_fixture(), 3, _first_agent_rule)
    assert v[(0, 1, 1)] == pytest.approx(v[(1, 0, 1)], abs=1e-12) == pytest.approx(v[(1, 1, 0)], abs=1e-12)


def test_nonuniqueness_demo(tmp_path):
    rep = nonuniqueness_demo(N_even=100, N_odd=1001, extra_odd=(101,), seed=1, out_dir=tmp_path)
    assert rep["even_max_state1"] == 0.0 and rep["even_jumps"] == 0
    assert (tmp_path / "nonuniqueness_cube_root_1001.csv").exists()
    with pytest.raises(InvalidParameter):
        nonuniqueness_demo(N_even=3)


def test_feedback_demo_small():
    rep = feedback_nonconvergence_demo(N=350, Ns=(350,), replications=1, seed=4)
    assert rep["priority"]["350"]["mean"] > 0.05
    assert rep["open_loop_below_priority"]


def test_replicate_figures_cube_root(tmp_path):
    rep = replicate_figures("cube_root", seed=0, out_dir=tmp_path)
    assert set(rep["files"]) == {"figures_cube_root_branch.csv", "figures_cube_root_100.csv", "figures_cube_root_10000.csv"}
    with pytest.raises(UnknownExample):
        replicate_figures("nope")


def test_study_outputs_byte_identical(tmp_path, mr):
    for d in ("a", "b"):
        nonuniqueness_demo(N_even=10, N_odd=101, extra_odd=(), seed=3, out_dir=tmp_path / d / "nu")
        rate_study(mr, paper_machine_policy(mr), Ns=(10, 30), mode="mc", replications=3, seed=5, out_dir=tmp_path / d / "rate")
    assert _dirs_equal(tmp_path / "a" / "nu", tmp_path / "b" / "nu")
    assert _dirs_equal(tmp_path / "a" / "rate", tmp_path / "b" / "rate")
