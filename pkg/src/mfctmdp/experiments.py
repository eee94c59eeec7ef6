"""Scripted studies: convergence rate, equivalence, non-uniqueness, feedback failure, figure data.

Every study can write a directory with ``study.json`` (configuration and
summary) and CSV files named ``{study}_{model}_{N}.csv``.  Outputs depend
only on the arguments and the seed.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._backend import njit
from .errors import InvalidParameter, LatticeTooLarge, UnknownExample
from .exact import enumerate_lattice, policy_evaluation, stationary_policy_value
from .limit import LimitTrajectory, integrate_limit, integrate_limit_feedback, objective_F, optimize_switching
from .model import ActionGrid, ModelSpec, RelaxedControlPath, StateSpace, lift_policy, round_measure
from .models import fluid_priority, fluid_priority_theta, initial_measure, priority_feedback, registry_get
from .simulate import (
    Feedback,
    JointPolicy,
    OpenLoop,
    Trajectory,
    discounted_reward,
    monte_carlo_value,
    replication_seeds,
    simulate,
    simulate_joint,
    system_rates,
)

log = logging.getLogger(__name__)

__all__ = [
    "RateStudyResult",
    "PathDistanceResult",
    "path_distance",
    "rate_study",
    "equivalence_fixture",
    "equivalence_study",
    "joint_policy_value",
    "nonuniqueness_demo",
    "feedback_nonconvergence_demo",
    "replicate_figures",
    "paper_machine_policy",
    "EXAMPLES",
]

DISTANCE_NODES = 200


# --------------------------------------------------------------------------
# output helpers


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_plain) + "\n")


def _plain(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _path_rows(times, mu):
    return [[t, *m] for t, m in zip(times, mu)]


def _state_header(S):
    return ["t"] + [f"mu_{i}" for i in range(S)]


# --------------------------------------------------------------------------
# distances


def path_distance(traj: Trajectory, reference: LimitTrajectory, t_max: float | None = None, n_nodes: int = DISTANCE_NODES) -> float:
    """sup over an ``n_nodes`` grid of the total-variation distance between the two paths."""
    T = min(traj.horizon, reference.times[-1]) if t_max is None else t_max
    grid = np.linspace(0.0, T, n_nodes)
    return float(0.5 * np.abs(traj.measure_at(grid) - reference.at(grid)).sum(axis=1).max())


@dataclass
class PathDistanceResult:
    Ns: list
    distances: dict  # N -> list per replication

    def mean(self, N) -> float:
        return float(np.mean(self.distances[N]))


def paper_machine_policy(model: ModelSpec) -> RelaxedControlPath:
    """Do nothing until ln 2, repair half of the broken machines until T - ln 2, then do nothing."""
    T = model.horizon
    idle = model.actions.dirac({1: 0})
    half = np.array([[1.0, 0.0], [0.5, 0.5]])
    return RelaxedControlPath.from_segments([(0.0, idle), (math.log(2.0), half), (T - math.log(2.0), idle)], T)


# --------------------------------------------------------------------------
# rate study


@dataclass
class RateStudyResult:
    Ns: list
    gaps: list
    sqrt_n_gaps: list
    values: list
    standard_errors: list
    mode: str
    reference_value: float
    slope: float
    ratio_max_to_median: float
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _loglog_slope(Ns, gaps) -> float:
    x = np.log(np.asarray(Ns, dtype=float))
    g = np.asarray(gaps, dtype=float)
    ok = g > 0
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(x[ok], np.log(g[ok]), 1)[0])


def rate_study(model: ModelSpec, control: RelaxedControlPath, Ns: Sequence[int] = (10, 20, 40, 80, 160, 320),
               mode: str = "exact", seed=0, replications: int = 200, mu0=None, out_dir=None) -> RateStudyResult:
    """|V^N of the open-loop control from the rounded initial measure - V^F| for each N.

    ``mode="exact"`` uses backward policy evaluation on the lattice and falls
    back to Monte Carlo if the lattice is too large.
    """
    if not model.finite_horizon:
        raise InvalidParameter("the rate study needs a finite horizon")
    if mode not in ("exact", "mc"):
        raise InvalidParameter(f"unknown mode {mode!r}")
    mu0 = initial_measure(model) if mu0 is None else np.asarray(mu0, dtype=float)
    ref = objective_F(model, mu0, control)
    notes, values, ses, gaps, used = [], [], [], [], []
    children = replication_seeds(seed, len(Ns))
    for N, child in zip(Ns, children):
        counts = round_measure(mu0, N).as_array()
        m = mode
        if m == "exact":
            try:
                vt = policy_evaluation(model, N, OpenLoop(control))
                v, se = vt.value_at(counts), 0.0
            except LatticeTooLarge:
                msg = f"N={N}: lattice too large, using Monte Carlo"
                log.warning(msg)
                notes.append(msg)
                m = "mc"
        if m == "mc":
            res = monte_carlo_value(model, N, counts, OpenLoop(control), replications, child)
            v, se = res.mean, res.se
        used.append(m)
        values.append(float(v))
        ses.append(float(se))
        gaps.append(abs(float(v) - ref))
    sq = [math.sqrt(N) * g for N, g in zip(Ns, gaps)]
    med = float(np.median(sq))
    result = RateStudyResult(
        Ns=list(map(int, Ns)), gaps=gaps, sqrt_n_gaps=sq, values=values, standard_errors=ses,
        mode=mode if all(u == mode for u in used) else "mixed", reference_value=ref,
        slope=_loglog_slope(Ns, gaps), ratio_max_to_median=float(max(sq) / med) if med > 0 else float("inf"), notes=notes,
    )
    if out_dir is not None:
        out = Path(out_dir)
        _write_json(out / "study.json", {"study": "rate", "model": model.name, "params": dict(model.params),
                                         "seed": seed, "replications": replications, "summary": result.as_dict()})
        for N, g, s, v, e in zip(Ns, gaps, sq, values, ses):
            _write_rows(out / f"rate_{model.name}_{N}.csv", ["N", "value", "se", "reference", "gap", "sqrt_n_gap"],
                        [[int(N), v, e, ref, g, s]])
    return result


# --------------------------------------------------------------------------
# equivalence of the joint and measure-valued formulations


@njit(cache=True)
def _fx_rates(mu, theta):
    Q = np.zeros((2, 2, 2))
    for a in range(2):
        up = 1.0 + a + mu[1]
        down = 2.0 - a + 0.5 * mu[0]
        Q[0, a, 1] = up
        Q[0, a, 0] = -up
        Q[1, a, 0] = down
        Q[1, a, 1] = -down
    return Q


@njit(cache=True)
def _fx_rewards(mu, theta):
    R = np.zeros((2, 2))
    for a in range(2):
        R[0, a] = 1.0 - 0.3 * a + mu[0]
        R[1, a] = -0.5 + 0.2 * a * mu[1]
    return R


@njit(cache=True)
def _fx_terminal(mu, theta):
    return 0.0


def equivalence_fixture(beta: float = 1.0) -> ModelSpec:
    """Two states, two actions in each, mean-field dependent rates and rewards."""
    return ModelSpec(
        name="two_state_fixture",
        states=StateSpace((0, 1)),
        actions=ActionGrid(((0, 1), (0, 1))),
        rates=_fx_rates,
        rewards=_fx_rewards,
        terminal=_fx_terminal,
        theta=np.zeros(1),
        beta=beta,
        horizon=math.inf,
        params={"mu0": [1.0, 0.0]},
    )


def _first_agent_rule(k, x):
    """Lowest-indexed agent in its state plays action 1, everyone else action 0."""
    x = list(x)
    return [1.0, 0.0] if x[k] in x[:k] else [0.0, 1.0]


@njit(cache=True)
def _first_agent_lift(counts, N, theta):
    W = np.zeros((counts.shape[0], 2))
    for i in range(counts.shape[0]):
        if counts[i] == 0:
            W[i, 0] = 1.0
        else:
            W[i, 1] = 1.0 / counts[i]
            W[i, 0] = 1.0 - W[i, 1]
    return W


def joint_policy_value(model: ModelSpec, N: int, rule) -> dict:
    """Exact value of a stationary per-agent policy on the joint space S^N (linear solve)."""
    S, A = model.actions.mask.shape
    states = [tuple(x) for x in itertools.product(range(S), repeat=N)]
    index = {x: k for k, x in enumerate(states)}
    rows, cols, vals = [], [], []
    r = np.zeros(len(states))
    for k, x in enumerate(states):
        xa = np.array(x)
        mu = np.bincount(xa, minlength=S) / N
        Q = model.rate_tensor(mu)
        R = model.reward_tensor(mu)
        for agent in range(N):
            w = np.zeros(A)
            kern = np.asarray(rule(agent, xa), dtype=float)
            w[: kern.size] = kern
            row = w @ Q[x[agent]]
            r[k] += (w @ R[x[agent]]) / N
            for j in range(S):
                if j != x[agent] and row[j] != 0.0:
                    y = list(x)
                    y[agent] = j
                    rows += [k, k]
                    cols += [index[tuple(y)], k]
                    vals += [row[j], -row[j]]
    G = sp.csr_matrix((vals, (rows, cols)), shape=(len(states), len(states)))
    v = spla.spsolve((model.beta * sp.identity(len(states), format="csc") - G).tocsc(), r)
    return {x: float(v[k]) for k, x in enumerate(states)}


def _aggregation_error(model: ModelSpec, N: int, rule) -> float:
    """max |joint aggregated rate - measure rate under the lifted profile| over all joint states."""
    S, A = model.actions.mask.shape
    worst = 0.0
    for x in itertools.product(range(S), repeat=N):
        xa = np.array(x)
        counts = np.bincount(xa, minlength=S)
        mu = counts / N
        Q = model.rate_tensor(mu)
        agg = np.zeros((S, S))
        for k in range(N):
            agg[x[k]] += np.asarray(rule(k, xa), dtype=float) @ Q[x[k]]
        np.fill_diagonal(agg, 0.0)
        lifted = lift_policy(rule, xa, S)
        meas = np.zeros((S, S))
        for i, j, rate in system_rates(model, counts, lifted):
            meas[i, j] = rate
        worst = max(worst, float(np.max(np.abs(np.clip(agg, 0, None) - meas))))
    return worst


def equivalence_study(model: ModelSpec | None = None, N: int = 2, seed=0, replications: int = 2000,
                      x0: Sequence[int] | None = None, out_dir=None) -> dict:
    """Three-way comparison for a symmetric per-agent rule and its per-state lift.

    (a) joint and measure rates agree exactly at every joint state;
    (b) Monte Carlo values of both simulators agree within 3 standard errors;
    (c) both agree with the exact measure-valued value, which in turn equals
        the exact joint-space value.
    """
    model = equivalence_fixture() if model is None else model
    if N > 4:
        raise InvalidParameter("the equivalence study enumerates S^N; keep N <= 4")
    S = model.n_states
    x0 = [0] * N if x0 is None else list(x0)
    counts0 = np.bincount(np.asarray(x0), minlength=S)
    rule = _first_agent_rule
    lifted = Feedback(_first_agent_lift, np.zeros(1), "first_agent_lift")
    agg_err = _aggregation_error(model, N, rule)
    exact_measure = stationary_policy_value(model, N, lambda c: _first_agent_lift(np.asarray(c), N, np.zeros(1)))
    v_measure = exact_measure.value_at(counts0)
    joint = joint_policy_value(model, N, rule)
    v_joint = joint[tuple(x0)]
    s_meas, s_joint = replication_seeds(seed, 2)
    mc_meas = monte_carlo_value(model, N, counts0, lifted, replications, s_meas)
    joint_vals = np.array([discounted_reward(model, simulate_joint(model, N, x0, JointPolicy(rule), c))
                           for c in s_joint.spawn(replications)])
    mc_joint_mean = float(joint_vals.mean())
    mc_joint_se = float(joint_vals.std(ddof=1) / math.sqrt(replications)) if replications > 1 else 0.0
    # permutation invariance of the joint value
    perm_gap = max(abs(joint[tuple(p)] - v_joint) for p in itertools.permutations(x0))
    report = {
        "model": model.name,
        "N": N,
        "x0": x0,
        "replications": replications,
        "seed": seed,
        "aggregation_max_error": agg_err,
        "exact_measure_value": v_measure,
        "exact_joint_value": v_joint,
        "exact_gap": abs(v_measure - v_joint),
        "permutation_gap": perm_gap,
        "mc_measure_mean": mc_meas.mean,
        "mc_measure_se": mc_meas.se,
        "mc_joint_mean": mc_joint_mean,
        "mc_joint_se": mc_joint_se,
        "measure_vs_exact_in_3se": abs(mc_meas.mean - v_measure) <= 3 * mc_meas.se,
        "joint_vs_exact_in_3se": abs(mc_joint_mean - v_measure) <= 3 * mc_joint_se,
        "joint_vs_measure_in_3se": abs(mc_joint_mean - mc_meas.mean) <= 3 * math.hypot(mc_meas.se, mc_joint_se),
    }
    if out_dir is not None:
        out = Path(out_dir)
        _write_json(out / "study.json", {"study": "equivalence", "summary": report})
        _write_rows(out / f"equivalence_{model.name}_{N}.csv", ["replication", "measure_value", "joint_value"],
                    [[k, a, b] for k, (a, b) in enumerate(zip(mc_meas.values, joint_vals))])
    return report


# --------------------------------------------------------------------------
# non-uniqueness of the limit


def _cube_branch(t):
    return (2.0 * np.asarray(t) / 3.0) ** 1.5


def _cube_counts(N: int, one_agent: bool) -> np.ndarray:
    return np.array([1, N - 1] if one_agent else [0, N], dtype=np.int64)


def nonuniqueness_demo(N_even: int = 100, N_odd: int = 10001, seed=0, t_cap: float = 1.0, extra_odd: Sequence[int] = (101,),
                       out_dir=None) -> dict:
    """Even N starts with nobody in state 1 and stays there; odd N starts with one agent there.

    Reports the largest fraction ever in state 1 for even N and, for each odd
    N, the sup distance to (2t/3)^(3/2) over [0, t_cap].
    """
    if N_even % 2 or N_odd % 2 == 0:
        raise InvalidParameter("N_even must be even and N_odd odd")
    model = registry_get("cube_root")
    null = OpenLoop(RelaxedControlPath.constant(model.actions.dirac(), model.horizon))
    odd_Ns = sorted({*extra_odd, N_odd})
    seeds = replication_seeds(seed, 1 + len(odd_Ns))
    grid = np.linspace(0.0, t_cap, DISTANCE_NODES)
    even = simulate(model, N_even, _cube_counts(N_even, False), null, seeds[0])
    report = {"N_even": N_even, "even_max_state1": float(even.measures[:, 0].max()), "even_jumps": even.n_jumps,
              "t_cap": t_cap, "odd": {}}
    paths = {N_even: even}
    for N, s in zip(odd_Ns, seeds[1:]):
        tr = simulate(model, N, _cube_counts(N, True), null, s)
        paths[N] = tr
        report["odd"][str(N)] = float(np.max(np.abs(tr.measure_at(grid)[:, 0] - _cube_branch(grid))))
    dists = [report["odd"][str(N)] for N in odd_Ns]
    report["odd_distance_decreasing"] = bool(all(b < a for a, b in zip(dists[:-1], dists[1:])))
    if out_dir is not None:
        out = Path(out_dir)
        _write_json(out / "study.json", {"study": "nonuniqueness", "seed": seed, "summary": report})
        fine = np.linspace(0.0, model.horizon, 401)
        for N, tr in paths.items():
            _write_rows(out / f"nonuniqueness_cube_root_{N}.csv", ["t", "mu_1", "branch"],
                        [[t, m, b] for t, m, b in zip(fine, tr.measure_at(fine)[:, 0], _cube_branch(np.minimum(fine, 1.5 * 0.99 ** (2 / 3))))])
    return report


# --------------------------------------------------------------------------
# feedback non-convergence


def _resource_runs(model, N, seed, replications, det, open_path):
    prio = Feedback(priority_feedback, np.array([model.params["priority_threshold"]]), "priority")
    out = {"open_loop": [], "priority": []}
    paths = {}
    for name, pol, s in (("open_loop", OpenLoop(open_path), 0), ("priority", prio, 1)):
        for r, child in enumerate(replication_seeds([seed, N, s], replications)):
            tr = simulate(model, N, initial_measure(model), pol, child)
            out[name].append(path_distance(tr, det))
            if r == 0:
                paths[name] = tr
    return out, paths


def feedback_nonconvergence_demo(N: int = 1400, threshold: float | None = None, seed=0, Ns: Sequence[int] = (350, 1400, 5600),
                                 replications: int = 3, out_dir=None) -> dict:
    """Deterministic priority trajectory vs N-agent paths under its open-loop replay and under the priority feedback."""
    params = {} if threshold is None else {"priority_threshold": threshold}
    model = registry_get("resource_competition", params)
    det, open_path = integrate_limit_feedback(model, initial_measure(model), fluid_priority, fluid_priority_theta(model))
    Ns = sorted({*Ns, N})
    report = {"threshold": model.params["priority_threshold"], "replications": replications, "seed": seed,
              "open_loop": {}, "priority": {}}
    all_paths = {}
    for n in Ns:
        d, paths = _resource_runs(model, n, seed, replications, det, open_path)
        all_paths[n] = paths
        for k in d:
            report[k][str(n)] = {"mean": float(np.mean(d[k])), "per_replication": d[k]}
    ol = [report["open_loop"][str(n)]["mean"] for n in Ns]
    pr = [report["priority"][str(n)]["mean"] for n in Ns]
    report["open_loop_decreasing"] = bool(all(b < a for a, b in zip(ol[:-1], ol[1:])))
    report["priority_min_distance"] = float(min(pr))
    report["open_loop_below_priority"] = bool(report["open_loop"][str(N)]["mean"] < report["priority"][str(N)]["mean"])
    if out_dir is not None:
        out = Path(out_dir)
        _write_json(out / "study.json", {"study": "feedback", "summary": report})
        grid = np.linspace(0.0, model.horizon, 501)
        _write_rows(out / "feedback_resource_competition_deterministic.csv", _state_header(8), _path_rows(grid, det.at(grid)))
        for n, paths in all_paths.items():
            for name, tr in paths.items():
                _write_rows(out / f"feedback_resource_competition_{n}_{name}.csv", _state_header(8), _path_rows(grid, tr.measure_at(grid)))
    return report


# --------------------------------------------------------------------------
# figure data


EXAMPLES = ("machine_replacement", "sir_malware", "cube_root", "resource_competition")


def replicate_figures(name: str, seed=0, out_dir=None) -> dict:
    """Deterministic trajectory plus simulated paths for one of the applications, as CSV."""
    if name not in EXAMPLES:
        raise UnknownExample(f"unknown example {name!r}; choose from {', '.join(EXAMPLES)}")
    files: dict[str, list] = {}
    out = Path(out_dir) if out_dir is not None else None

    def emit(fname, header, rows):
        files[fname] = rows
        if out is not None:
            _write_rows(out / fname, header, rows)

    if name == "cube_root":
        model = registry_get(name)
        grid = np.linspace(0.0, model.horizon, 401)
        null = OpenLoop(RelaxedControlPath.constant(model.actions.dirac(), model.horizon))
        emit("figures_cube_root_branch.csv", ["t", "mu_1"], [[t, b] for t, b in zip(grid, _cube_branch(np.minimum(grid, 1.5 * 0.99 ** (2 / 3))))])
        for N, s in zip((100, 10000), replication_seeds(seed, 2)):
            tr = simulate(model, N, _cube_counts(N, True), null, s)
            emit(f"figures_cube_root_{N}.csv", ["t", "mu_1"], [[t, m] for t, m in zip(grid, tr.measure_at(grid)[:, 0])])
        summary = {"Ns": [100, 10000]}
    elif name == "resource_competition":
        rep = feedback_nonconvergence_demo(seed=seed, Ns=(1400,), replications=1, out_dir=out)
        return {"example": name, "summary": rep}
    else:
        model = registry_get(name)
        mu0 = initial_measure(model)
        if name == "machine_replacement":
            opt = optimize_switching(model, "three_phase")
            Ns = (100, 1000)
        else:
            opt = optimize_switching(model, "one_switch")
            Ns = (1000,)
        det = opt.trajectory
        S = model.n_states
        grid = np.linspace(0.0, model.horizon, 401)
        emit(f"figures_{name}_deterministic.csv", _state_header(S), _path_rows(grid, det.at(grid)))
        dists = {}
        for N, s in zip(Ns, replication_seeds(seed, len(Ns))):
            tr = simulate(model, N, mu0, OpenLoop(opt.control), s)
            dists[N] = path_distance(tr, det)
            emit(f"figures_{name}_{N}.csv", _state_header(S), _path_rows(grid, tr.measure_at(grid)))
        summary = {"parameters": opt.parameters, "value": opt.value, "sup_tv": dists}
    if out is not None:
        _write_json(out / "study.json", {"study": "figures", "example": name, "seed": seed, "summary": summary})
    return {"example": name, "files": sorted(files), "summary": summary}
