"""Exact solvers for the measure-valued MDP on the lattice P_N(S).

Values are dense arrays indexed by the colexicographic rank of the count
vector.  All solvers work from the per-point tensors q(.|i,a,mu) and
r(i,a,mu), evaluated once per lattice.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels as K
from .errors import (
    CoupledActionsUnsupported,
    InvalidParameter,
    LatticeTooLarge,
    MaxIterations,
    StepTooLarge,
    UndiscountedInfinite,
)
from .grids import check_grid, make_time_grid, step_profiles
from .model import ModelSpec

__all__ = [
    "SimplexLattice",
    "ValueTable",
    "enumerate_lattice",
    "bellman_operator",
    "value_iteration",
    "finite_horizon_solve",
    "policy_evaluation",
    "stationary_policy_value",
    "uniformization_rate",
    "LATTICE_CAP",
]

LATTICE_CAP = 50_000_000
STABILITY = 0.5  # bound on h * N (|S| - 1) q_max for the explicit backward RK4
MAX_STORED = 2_000_000


@dataclass
class SimplexLattice:
    """All count vectors of N agents on |S| states, colexicographic order."""

    N: int
    n_states: int
    points: np.ndarray  # (P, S) int64

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.size

    @property
    def fractions(self) -> np.ndarray:
        return self.points / self.N

    def _keys(self, counts: np.ndarray) -> np.ndarray:
        base = self.N + 1
        w = base ** np.arange(self.n_states, dtype=object) if base ** self.n_states >= 2**62 else base ** np.arange(self.n_states, dtype=np.int64)
        return counts @ w

    def __post_init__(self):
        self._sorted_keys = self._keys(self.points)

    def index(self, counts) -> int | np.ndarray:
        c = np.asarray(counts, dtype=np.int64)
        idx = np.searchsorted(self._sorted_keys, self._keys(c))
        single = c.ndim == 1
        chk = np.atleast_1d(idx)
        cc = np.atleast_2d(c)
        if np.any(chk >= self.size) or np.any(self.points[np.minimum(chk, self.size - 1)] != cc):
            raise InvalidParameter(f"not a lattice point for N={self.N}: {counts}")
        return int(idx) if single else idx

    @property
    def successors(self) -> np.ndarray:
        """succ[p, i, j] = rank of the point after one agent moves i -> j (p itself if impossible)."""
        if not hasattr(self, "_succ"):
            P, S = self.points.shape
            succ = np.repeat(np.arange(P)[:, None, None], S, axis=1).repeat(S, axis=2)
            for i in range(S):
                has = self.points[:, i] > 0
                for j in range(S):
                    if i == j:
                        continue
                    moved = self.points[has].copy()
                    moved[:, i] -= 1
                    moved[:, j] += 1
                    succ[has, i, j] = np.searchsorted(self._sorted_keys, self._keys(moved))
            self._succ = succ
        return self._succ


def enumerate_lattice(N: int, n_states: int, cap: int | None = None) -> SimplexLattice:
    """Complete enumeration of P_N(S) in colexicographic order (size capped at ``LATTICE_CAP``)."""
    cap = LATTICE_CAP if cap is None else cap
    if N < 1 or n_states < 2:
        raise InvalidParameter("need N >= 1 and at least two states")
    size = math.comb(N + n_states - 1, n_states - 1)
    if size > cap:
        raise LatticeTooLarge(f"|P_N(S)| = {size} exceeds cap {cap}")
    pts = _compositions(N, n_states)
    lat = SimplexLattice(N, n_states, pts)
    order = np.argsort(lat._sorted_keys, kind="stable")
    return SimplexLattice(N, n_states, pts[order])


def _compositions(N: int, S: int) -> np.ndarray:
    if S == 1:
        return np.array([[N]], dtype=np.int64)
    blocks = []
    for last in range(N + 1):
        rest = _compositions(N - last, S - 1)
        blocks.append(np.hstack([rest, np.full((rest.shape[0], 1), last, dtype=np.int64)]))
    return np.vstack(blocks)


@dataclass
class ValueTable:
    """Values (and optionally argmax action indices) on a lattice.

    For time-dependent solutions ``values`` is v(0, .) and ``history`` holds
    v(t, .) at ``times`` (a subsample of the grid when storage would be large).
    """

    lattice: SimplexLattice
    values: np.ndarray
    policy: np.ndarray | None = None
    times: np.ndarray | None = None
    history: np.ndarray | None = None
    policy_history: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def value_at(self, counts) -> float:
        return float(self.values[self.lattice.index(counts)])

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        S = self.lattice.n_states
        head = [f"n_{i}" for i in range(S)] + ["value"]
        if self.policy is not None:
            head += [f"action_{i}" for i in range(S)]
        lines = [",".join(head)]
        for p in range(self.lattice.size):
            row = [str(int(c)) for c in self.lattice.points[p]] + [repr(float(self.values[p]))]
            if self.policy is not None:
                row += [str(int(a)) for a in self.policy[p]]
            lines.append(",".join(row))
        path.write_text("\n".join(lines) + "\n")
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")
        return path


# --------------------------------------------------------------------------
# helpers


def uniformization_rate(model: ModelSpec, N: int) -> float:
    return N * (model.n_states - 1) * model.q_max


def _tensors(model: ModelSpec, lattice: SimplexLattice):
    S, A = model.actions.mask.shape
    kern = K.select("lattice_tensors", model.rates, model.rewards)
    return kern(model.rates, model.rewards, model.theta, lattice.points, lattice.N, S, A)


def _require_separable(model: ModelSpec):
    if model.couplings:
        raise CoupledActionsUnsupported(
            f"model {model.name} couples actions across states; the per-state maximization does not apply"
        )


def _terminal(model: ModelSpec, lattice: SimplexLattice) -> np.ndarray:
    kern = K.select("terminal_values", model.terminal)
    return np.asarray(kern(model.terminal, model.theta, lattice.points, lattice.N), dtype=float)


# --------------------------------------------------------------------------
# infinite horizon


def bellman_operator(model: ModelSpec, lattice: SimplexLattice, v, _cache=None):
    """Uniformized Bellman operator; returns (Tv, argmax action index per point and state)."""
    if model.beta <= 0:
        raise UndiscountedInfinite("the Bellman operator needs beta > 0")
    _require_separable(model)
    Qs, Rs = _cache if _cache is not None else _tensors(model, lattice)
    lam = uniformization_rate(model, lattice.N)
    v = np.ascontiguousarray(v, dtype=float)
    return K.bellman_sweep(Qs, Rs, lattice.points, lattice.N, lattice.successors, model.actions.mask, v, model.beta, lam)


def value_iteration(model: ModelSpec, N: int, tol: float = 1e-10, max_iter: int = 1_000_000, v0=None) -> ValueTable:
    """Fixed point of the Bellman operator to within ``tol`` in sup norm.

    Stops once an update is at most tol * beta / Lambda, which bounds the
    distance to the fixed point by ``tol``.
    """
    if model.beta <= 0:
        raise UndiscountedInfinite("value iteration needs beta > 0")
    _require_separable(model)
    lat = enumerate_lattice(N, model.n_states)
    cache = _tensors(model, lat)
    lam = uniformization_rate(model, N)
    v = np.zeros(lat.size) if v0 is None else np.asarray(v0, dtype=float).copy()
    stop = tol * model.beta / lam if lam > 0 else tol
    for it in range(1, max_iter + 1):
        new, arg = bellman_operator(model, lat, v, cache)
        delta = float(np.max(np.abs(new - v)))
        v = new
        if delta <= stop:
            break
    else:
        raise MaxIterations(f"value iteration did not reach {tol} in {max_iter} sweeps")
    _, arg = bellman_operator(model, lat, v, cache)
    meta = {"N": N, "beta": model.beta, "tol": tol, "iterations": it, "Lambda_bar": lam, "model": model.name, "solver": "value_iteration"}
    return ValueTable(lat, v, arg, meta=meta)


def stationary_policy_value(model: ModelSpec, N: int, profiles) -> ValueTable:
    """Value of a stationary Markov policy by solving (beta I - Q_pi) v = r_pi.

    ``profiles`` is either an array (P, |S|, max_actions) in lattice order or a
    callable ``counts -> profile``.
    """
    if model.beta <= 0:
        raise UndiscountedInfinite("stationary values need beta > 0")
    lat = enumerate_lattice(N, model.n_states)
    Qs, Rs = _tensors(model, lat)
    Wp = _profiles_on_lattice(model, lat, profiles)
    gen, r = _generator(lat, Qs, Rs, Wp)
    v = spla.spsolve((model.beta * sp.identity(lat.size, format="csc") - gen).tocsc(), r)
    meta = {"N": N, "beta": model.beta, "model": model.name, "solver": "linear_solve"}
    return ValueTable(lat, np.asarray(v), meta=meta)


def _profiles_on_lattice(model, lat, profiles) -> np.ndarray:
    if callable(profiles):
        return np.array([np.asarray(profiles(c), dtype=float) for c in lat.points])
    Wp = np.asarray(profiles, dtype=float)
    if Wp.ndim == 2:
        Wp = np.broadcast_to(Wp, (lat.size,) + Wp.shape).copy()
    return Wp


def _generator(lat: SimplexLattice, Qs, Rs, Wp):
    P, S = lat.points.shape
    n = lat.points.astype(float)
    rates = n[:, :, None] * np.einsum("pia,piaj->pij", Wp, Qs)  # (P, S, S)
    succ = lat.successors
    rows, cols, vals = [], [], []
    for i in range(S):
        for j in range(S):
            if i == j:
                continue
            rij = rates[:, i, j]
            keep = (lat.points[:, i] > 0) & (rij != 0.0)
            p = np.nonzero(keep)[0]
            rows += [p, p]
            cols += [succ[p, i, j], p]
            vals += [rij[keep], -rij[keep]]
    gen = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(P, P))
    r = np.einsum("pi,pia,pia->p", n / lat.N, Wp, Rs)
    return gen, r


# --------------------------------------------------------------------------
# finite horizon


def _grid_for(model: ModelSpec, N: int, time_grid, breakpoints=()) -> np.ndarray:
    if not model.finite_horizon:
        raise InvalidParameter("finite-horizon solver needs a finite horizon")
    lam = uniformization_rate(model, N)
    if time_grid is None:
        n = max(200, math.ceil(model.horizon * lam / STABILITY))
        return make_time_grid(model.horizon, n_steps=n, breakpoints=breakpoints)
    if isinstance(time_grid, (int, np.integer)):
        return make_time_grid(model.horizon, n_steps=int(time_grid), breakpoints=breakpoints)
    return check_grid(time_grid, model.horizon, breakpoints)


def _check_step(grid, lam):
    h = float(np.max(np.diff(grid)))
    if h * lam > STABILITY + 1e-12:
        raise StepTooLarge(f"h * N(|S|-1) q_max = {h * lam:.3g} > {STABILITY}")


def _backward(model, lat, grid, rhs, n_policy_cols):
    """Backward RK4 in s = T - t for dv/ds = -beta v + G(v, step)."""
    beta = model.beta
    v = _terminal(model, lat)
    n = grid.size - 1
    every = max(1, math.ceil((n + 1) * lat.size / MAX_STORED))
    keep = sorted(set(range(0, n + 1, every)) | {0, n})
    hist = {n: v.copy()}
    pol = {} if n_policy_cols else None
    for k in range(n - 1, -1, -1):
        h = grid[k + 1] - grid[k]
        f = lambda x: -beta * x + rhs(x, k)[0]  # noqa: E731
        k1 = f(v)
        k2 = f(v + 0.5 * h * k1)
        k3 = f(v + 0.5 * h * k2)
        k4 = f(v + h * k3)
        v = v + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if k in keep:
            hist[k] = v.copy()
            if pol is not None:
                pol[k] = rhs(v, k)[1].astype(np.int16)
    times = np.array([grid[k] for k in keep])
    history = np.array([hist[k] for k in keep])
    policy_history = np.array([pol[k] for k in keep if k in pol]) if pol is not None else None
    return v, times, history, policy_history


def finite_horizon_solve(model: ModelSpec, N: int, time_grid=None) -> ValueTable:
    """Optimal value v(0, .) and the time-indexed argmax policy by backward RK4.

    ``time_grid`` may be None (automatic, stable step), a number of steps, or
    an explicit node array starting at 0 and ending at the horizon.
    """
    _require_separable(model)
    lat = enumerate_lattice(N, model.n_states)
    Qs, Rs = _tensors(model, lat)
    grid = _grid_for(model, N, time_grid)
    lam = uniformization_rate(model, N)
    _check_step(grid, lam)
    succ, mask = lat.successors, model.actions.mask

    def rhs(v, k):
        return K.max_gain(Qs, Rs, lat.points, N, succ, mask, np.ascontiguousarray(v))

    v0, times, hist, pol = _backward(model, lat, grid, rhs, True)
    policy0 = rhs(v0, 0)[1]
    meta = {"N": N, "beta": model.beta, "Lambda_bar": lam, "steps": grid.size - 1, "model": model.name, "solver": "finite_horizon_rk4"}
    return ValueTable(lat, v0, policy0, times, hist, pol, meta)


def policy_evaluation(model: ModelSpec, N: int, policy, time_grid=None) -> ValueTable:
    """Expected reward of an open-loop or feedback policy from every lattice point.

    Linear backward RK4; control breakpoints are inserted as grid nodes.
    """
    from .simulate import Feedback, JumpAdapted, OpenLoop

    lat = enumerate_lattice(N, model.n_states)
    Qs, Rs = _tensors(model, lat)
    succ = lat.successors
    if isinstance(policy, OpenLoop):
        path = policy.path
        path.validate_for(model)
        grid = _grid_for(model, N, time_grid, path.breakpoints[1:])
        W = step_profiles(path, grid)
        cache = {}

        def profiles(k):
            key = id(path), int(np.searchsorted(path.breakpoints, 0.5 * (grid[k] + grid[k + 1]), side="right"))
            if key not in cache:
                cache.clear()
                cache[key] = np.ascontiguousarray(np.broadcast_to(W[k], (lat.size,) + W[k].shape))
            return cache[key]
    elif isinstance(policy, Feedback):
        grid = _grid_for(model, N, time_grid)
        Wall = np.ascontiguousarray(np.array([policy.profile(c, N) for c in lat.points]))

        def profiles(k):
            return Wall
    elif isinstance(policy, JumpAdapted):
        raise InvalidParameter("jump-adapted policies depend on the path history; use Monte Carlo")
    else:
        raise InvalidParameter(f"unsupported policy {policy!r}")
    lam = uniformization_rate(model, N)
    _check_step(grid, lam)

    def rhs(v, k):
        return K.policy_gain(Qs, Rs, lat.points, N, succ, profiles(k), np.ascontiguousarray(v)), None

    v0, times, hist, _ = _backward(model, lat, grid, rhs, False)
    meta = {"N": N, "beta": model.beta, "Lambda_bar": lam, "steps": grid.size - 1, "model": model.name, "solver": "policy_evaluation_rk4"}
    return ValueTable(lat, v0, None, times, hist, None, meta)
