"""Exact event-driven simulation of the N-agent system.

Two simulators share the same randomness layout (one Philox stream per
replication, uniforms drawn in chunks and consumed sequentially):

* ``simulate`` works on occupation counts, the sufficient statistic;
* ``simulate_joint`` tracks every agent and per-agent decision kernels.

Both return a ``Trajectory`` of constant segments.  Rewards are integrated in
closed form per segment.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels as K
from .errors import HorizonNotCovered, InfiniteHorizonUntruncated, InvalidParameter
from .model import EmpiricalMeasure, ModelSpec, RelaxedControlPath, check_profile, round_measure

__all__ = [
    "OpenLoop",
    "JumpAdapted",
    "Feedback",
    "JointPolicy",
    "Trajectory",
    "MartingaleResidual",
    "MCResult",
    "system_rates",
    "simulate",
    "simulate_joint",
    "discounted_reward",
    "monte_carlo_value",
    "martingale_residual",
    "truncation_time",
    "make_rng",
    "replication_seeds",
    "write_trajectory_csv",
]

# beta * T_trunc for infinite horizons; truncation error <= exp(-30) r_max / beta
TRUNCATION_EXPONENT = 30.0
CHUNK = 4096


# --------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class OpenLoop:
    """Time-only control; re-read at every jump and every breakpoint."""

    path: RelaxedControlPath


@dataclass(frozen=True)
class JumpAdapted:
    """Open-loop path sampled only when an agent jumps or the path switches.

    Between those epochs the profile is frozen.  Breakpoints whose profile
    change is at most ``switch_tol`` in total variation are not epochs, so a
    finely discretized smooth control is only refreshed at jumps.
    """

    path: RelaxedControlPath
    switch_tol: float = 1e-9


@dataclass(frozen=True)
class Feedback:
    """State feedback ``rule(counts, N, theta) -> (|S|, max_actions)`` profile.

    Pass a numba-compiled rule to keep the simulator in nopython mode; plain
    Python rules work through the interpreted kernel.
    """

    rule: Callable
    theta: np.ndarray = field(default_factory=lambda: np.zeros(1))
    name: str = "feedback"

    @classmethod
    def from_measure_rule(cls, fn: Callable[[np.ndarray], np.ndarray], name: str = "feedback") -> "Feedback":
        """Wrap ``fn(mu) -> profile`` (mu as fractions)."""

        def rule(counts, N, theta):
            return np.asarray(fn(np.asarray(counts, dtype=float) / N), dtype=float)

        return cls(rule, np.zeros(1), name)

    def profile(self, counts, N) -> np.ndarray:
        return np.asarray(self.rule(np.asarray(counts, dtype=np.int64), int(N), np.asarray(self.theta, dtype=float)), dtype=float)


@dataclass(frozen=True)
class JointPolicy:
    """Per-agent stationary kernels ``rule(k, x) -> weights`` over agent k's action grid."""

    rule: Callable
    name: str = "joint"


# --------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Piecewise-constant path; record ``n`` holds on [times[n], times[n+1]).

    ``moves[n]`` is the (from, to) transfer at ``times[n]``; (-1, -1) marks the
    start and segments split only because the control changed.
    """

    times: np.ndarray
    counts: np.ndarray
    controls: np.ndarray
    moves: np.ndarray
    horizon: float
    model: str = ""
    seed: int | None = None

    @property
    def N(self) -> int:
        return int(self.counts[0].sum())

    @property
    def measures(self) -> np.ndarray:
        return self.counts / self.N

    @property
    def n_jumps(self) -> int:
        return int(np.count_nonzero(self.moves[:, 0] >= 0))

    @property
    def jump_times(self) -> np.ndarray:
        return np.concatenate([[0.0], self.times[self.moves[:, 0] >= 0]])

    @property
    def final_counts(self) -> np.ndarray:
        return self.counts[-1]

    def index_at(self, t) -> np.ndarray:
        return np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, None)

    def counts_at(self, t) -> np.ndarray:
        return self.counts[self.index_at(t)]

    def measure_at(self, t) -> np.ndarray:
        return self.counts_at(t) / self.N

    def jump_path(self) -> "Trajectory":
        """Drop records created only by control changes."""
        keep = self.moves[:, 0] >= 0
        keep[0] = True
        return Trajectory(self.times[keep], self.counts[keep], self.controls[keep], self.moves[keep], self.horizon, self.model, self.seed)


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def replication_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """Independent child streams, one per replication."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(n)


def truncation_time(model: ModelSpec) -> float:
    if model.finite_horizon:
        return model.horizon
    return TRUNCATION_EXPONENT / model.beta


def _initial_counts(model: ModelSpec, N: int, mu0) -> np.ndarray:
    if isinstance(mu0, EmpiricalMeasure):
        c = mu0.as_array()
    else:
        arr = np.asarray(mu0)
        if np.issubdtype(arr.dtype, np.integer):
            c = arr.astype(np.int64)
        else:
            c = round_measure(arr, N).as_array()
    if c.shape != (model.n_states,) or c.sum() != N or np.any(c < 0):
        raise InvalidParameter(f"initial counts {c} do not describe {N} agents on {model.n_states} states")
    return c.copy()


# --------------------------------------------------------------------------
# rates


def system_rates(model: ModelSpec, mu, alpha) -> list[tuple[int, int, float]]:
    """Positive transition rates (i, j, N mu(i) sum_a q(j|i,a,mu) alpha_i(a))."""
    c = mu.as_array() if isinstance(mu, EmpiricalMeasure) else np.asarray(mu, dtype=np.int64)
    W = check_profile(model, alpha)
    N = int(c.sum())
    Q = model.rate_tensor(c / N)
    out = []
    S = model.n_states
    for i in range(S):
        if c[i] == 0:
            continue
        row = c[i] * np.einsum("a,aj->j", W[i], Q[i])
        for j in range(S):
            if j != i and row[j] > 0.0:
                out.append((i, j, float(row[j])))
    return out


# --------------------------------------------------------------------------
# measure-valued simulator


def _policy_arrays(model: ModelSpec, policy, horizon: float):
    S, A = model.actions.mask.shape
    if isinstance(policy, (OpenLoop, JumpAdapted)):
        path = policy.path
        path.validate_for(model)
        if path.horizon < horizon - 1e-12:
            raise HorizonNotCovered(f"control ends at {path.horizon} < horizon {horizon}")
        breaks = np.ascontiguousarray(path.breakpoints)
        weights = np.ascontiguousarray(path.weights)
        if isinstance(policy, OpenLoop):
            return K.MODE_OPEN_LOOP, breaks, weights, np.zeros(0), K.null_feedback, np.zeros(1)
        switches = np.ascontiguousarray(path.switch_times(policy.switch_tol))
        return K.MODE_JUMP_ADAPTED, breaks, weights, switches, K.null_feedback, np.zeros(1)
    if isinstance(policy, Feedback):
        dummy_b = np.zeros(1)
        dummy_w = np.zeros((1, S, A))
        return K.MODE_FEEDBACK, dummy_b, dummy_w, np.zeros(0), policy.rule, np.asarray(policy.theta, dtype=float)
    raise InvalidParameter(f"unsupported policy {policy!r}")


def simulate(model: ModelSpec, N: int, mu0, policy, seed, horizon: float | None = None) -> Trajectory:
    """One exact path of the occupation-count process up to the horizon.

    ``mu0`` may be an ``EmpiricalMeasure``, an integer count vector or a
    probability vector (rounded by largest remainder).  Infinite-horizon
    models are simulated up to ``30 / beta``.
    """
    T = truncation_time(model) if horizon is None else float(horizon)
    counts = _initial_counts(model, N, mu0)
    mode, breaks, weights, switches, fb_fn, fb_theta = _policy_arrays(model, policy, T)
    S, A = model.actions.mask.shape
    kern = K.select("sim_chunk", model.rates, fb_fn)
    rng = make_rng(seed)
    held = weights[0].copy() if mode != K.MODE_FEEDBACK else np.zeros((S, A))
    clock = np.array([0.0, 0.0, -1.0, -1.0])
    u = rng.random(CHUNK)
    out = []
    cap = CHUNK
    while True:
        ot = np.empty(cap)
        oc = np.empty((cap, S), dtype=np.int64)
        ow = np.empty((cap, S, A))
        of = np.empty(cap, dtype=np.int64)
        oj = np.empty(cap, dtype=np.int64)
        n, done = kern(model.rates, model.theta, fb_fn, fb_theta, mode, counts, clock, held,
                       breaks, weights, switches, T, u, ot, oc, ow, of, oj)
        out.append((ot[:n], oc[:n], ow[:n], of[:n], oj[:n]))
        if done:
            break
        pos = int(clock[1])
        if pos + 2 > u.size:
            u = np.concatenate([u[pos:], rng.random(CHUNK)])
            clock[1] = 0.0
    times = np.concatenate([o[0] for o in out])
    if times.size == 0:
        # horizon reached before the first record cannot happen for T > 0
        raise HorizonNotCovered("empty trajectory")
    return Trajectory(
        times=times,
        counts=np.concatenate([o[1] for o in out]),
        controls=np.concatenate([o[2] for o in out]),
        moves=np.stack([np.concatenate([o[3] for o in out]), np.concatenate([o[4] for o in out])], axis=1),
        horizon=T,
        model=model.name,
        seed=seed if isinstance(seed, (int, type(None))) else None,
    )


# --------------------------------------------------------------------------
# joint-state simulator


def simulate_joint(model: ModelSpec, N: int, x0: Sequence[int], policy: JointPolicy, seed, horizon: float | None = None) -> Trajectory:
    """Path of the full joint state x in S^N, projected to occupation counts.

    Each agent k uses its own kernel ``policy.rule(k, x)``, re-evaluated after
    every jump.  The recorded control is the per-state lift of the kernels.
    Uses the same uniform-stream layout as ``simulate``.
    """
    T = truncation_time(model) if horizon is None else float(horizon)
    x = np.asarray(x0, dtype=np.int64).copy()
    if x.size != N:
        raise InvalidParameter(f"joint state has {x.size} agents, expected {N}")
    S, A = model.actions.mask.shape
    rng = make_rng(seed)
    u = rng.random(CHUNK)
    pos = 0
    t = 0.0
    times, counts_l, ctrl_l, moves = [], [], [], []
    last = (-1, -1)
    while t < T:
        if pos + 2 > u.size:
            u = np.concatenate([u[pos:], rng.random(CHUNK)])
            pos = 0
        c = np.bincount(x, minlength=S).astype(np.int64)
        mu = c / N
        Q = model.rate_tensor(mu)
        kern = np.array([_pad(policy.rule(k, x), A) for k in range(N)])
        # per-state equal-weight mixture of the agents' kernels; empty states take action 0
        lifted = np.zeros((S, A))
        np.add.at(lifted, x, kern)
        occupied = c > 0
        lifted[occupied] /= c[occupied, None]
        lifted[~occupied, 0] = 1.0
        # per-agent rows, agents in index order
        rows = np.einsum("ka,kaj->kj", kern, Q[x])
        rows[np.arange(N), x] = 0.0
        rows = np.clip(rows, 0.0, None)
        total = float(rows.sum())
        times.append(t)
        counts_l.append(c)
        ctrl_l.append(lifted)
        moves.append(last)
        if total <= 0.0:
            break
        tau = -math.log1p(-u[pos]) / total
        pos += 1
        if t + tau >= T:
            break
        t += tau
        target = u[pos] * total
        pos += 1
        flat = np.cumsum(rows.ravel())
        idx = min(int(np.searchsorted(flat, target, side="right")), flat.size - 1)
        k, j = divmod(idx, S)
        last = (int(x[k]), int(j))
        x[k] = j
    return Trajectory(np.array(times), np.array(counts_l), np.array(ctrl_l), np.array(moves, dtype=np.int64), T, model.name)


def _pad(w, A):
    w = np.asarray(w, dtype=float)
    if w.size == A:
        return w
    out = np.zeros(A)
    out[: w.size] = w
    return out


# --------------------------------------------------------------------------
# rewards and Monte Carlo


def discounted_reward(model: ModelSpec, traj: Trajectory) -> float:
    """Exact integral of exp(-beta t) r over the path plus the discounted terminal reward."""
    beta = model.beta
    if beta <= 0.0 and math.isinf(traj.horizon):
        raise InfiniteHorizonUntruncated("beta = 0 needs a finite horizon")
    N = traj.N
    kern = K.select("segment_rewards", model.rewards)
    r = kern(model.rewards, model.theta, traj.counts, N, traj.controls)
    a = traj.times
    b = np.append(traj.times[1:], traj.horizon)
    if beta > 0.0:
        w = (np.exp(-beta * a) - np.exp(-beta * b)) / beta
    else:
        w = b - a
    total = float(np.dot(r, w))
    if model.finite_horizon:
        total += math.exp(-beta * traj.horizon) * model.terminal_reward(traj.final_counts / N)
    return total


@dataclass
class MCResult:
    mean: float
    se: float
    values: np.ndarray

    def __iter__(self):
        return iter((self.mean, self.se, self.values))


def _one_value(args):
    model, N, mu0, policy, child = args
    return discounted_reward(model, simulate(model, N, mu0, policy, child))


def monte_carlo_value(model: ModelSpec, N: int, mu0, policy, replications: int, seed, jobs: int = 1) -> MCResult:
    """Mean and standard error of the discounted reward over seeded replications."""
    if replications < 1:
        raise InvalidParameter("replications must be >= 1")
    children = replication_seeds(seed, replications)
    tasks = [(model, N, mu0, policy, c) for c in children]
    if jobs > 1 and replications > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            vals = np.fromiter(ex.map(_one_value, tasks, chunksize=max(1, replications // (4 * jobs))), float, replications)
    else:
        vals = np.array([_one_value(t) for t in tasks])
    se = float(vals.std(ddof=1) / math.sqrt(replications)) if replications > 1 else 0.0
    return MCResult(float(vals.mean()), se, vals)


# --------------------------------------------------------------------------
# martingale residual


@dataclass
class MartingaleResidual:
    state: int
    times: np.ndarray
    values: np.ndarray


def martingale_residual(model: ModelSpec, traj: Trajectory, j: int, sample_times) -> MartingaleResidual:
    """M_t(j) = mu_t(j) - mu_0(j) - int_0^t f_j(mu_s, alpha_s) ds at ``sample_times``.

    The drift integral is exact because the integrand is constant per record.
    """
    ts = np.asarray(sample_times, dtype=float)
    if np.any(ts < 0) or np.any(ts > traj.horizon + 1e-12):
        raise InvalidParameter("sample times outside the trajectory window")
    N = traj.N
    kern = K.select("segment_drifts", model.rates)
    f = kern(model.rates, model.theta, traj.counts, N, traj.controls)[:, j]
    ends = np.append(traj.times[1:], traj.horizon)
    cum = np.concatenate([[0.0], np.cumsum(f * (ends - traj.times))])
    idx = traj.index_at(ts)
    drift = cum[idx] + f[idx] * (ts - traj.times[idx])
    mu = traj.counts[idx, j] / N
    return MartingaleResidual(j, ts, mu - traj.counts[0, j] / N - drift)


# --------------------------------------------------------------------------
# export


def write_trajectory_csv(traj: Trajectory, path, meta: dict | None = None) -> Path:
    """CSV (t, state fractions, control id) plus a JSON sidecar with metadata and the control table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    S = traj.counts.shape[1]
    ids, table = [], []
    for w in traj.controls:
        for k, known in enumerate(table):
            if np.array_equal(known, w):
                ids.append(k)
                break
        else:
            table.append(w)
            ids.append(len(table) - 1)
    header = ",".join(["t"] + [f"state_{i}_fraction" for i in range(S)] + ["control_id"])
    lines = [header]
    mu = traj.measures
    for n in range(traj.times.size):
        lines.append(",".join([repr(float(traj.times[n]))] + [repr(float(v)) for v in mu[n]] + [str(ids[n])]))
    lines.append(",".join([repr(float(traj.horizon))] + [repr(float(v)) for v in mu[-1]] + [str(ids[-1])]))
    path.write_text("\n".join(lines) + "\n")
    side = {"N": traj.N, "model": traj.model, "seed": traj.seed, "horizon": traj.horizon, "n_jumps": traj.n_jumps}
    side.update(meta or {})
    side["controls"] = [w.tolist() for w in table]
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)
