"""Model abstraction, empirical-measure arithmetic and assumption checks.

A model is stored in tensor form.  ``rates(mu, theta)`` returns an array
``Q[i, a, j]`` holding q({j} | i, a-th action of state i, mu) for every state
and action-grid index, and ``rewards(mu, theta)`` returns ``R[i, a]``.  Padded
action slots (states with fewer actions than the widest grid) are zero and
masked out by ``ActionGrid.mask``.  Keeping the model in this form lets the
numeric kernels take the functions as arguments, compiled or not.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import EmptySourceState, InvalidParameter, SameState

__all__ = [
    "StateSpace",
    "ActionGrid",
    "EmpiricalMeasure",
    "ModelSpec",
    "RelaxedControlPath",
    "ValidationReport",
    "measure_transition",
    "validate_assumptions",
    "default_probe_grid",
    "lift_policy",
    "round_measure",
    "check_profile",
]


@dataclass(frozen=True)
class StateSpace:
    labels: tuple

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise InvalidParameter(f"state labels must be distinct: {self.labels}")
        if not self.labels:
            raise InvalidParameter("state space is empty")

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        return self.labels.index(label)

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class ActionGrid:
    """Finite admissible action list D(i) for every state."""

    per_state: tuple

    def __post_init__(self):
        grids = tuple(tuple(g) for g in self.per_state)
        for i, g in enumerate(grids):
            if not g:
                raise InvalidParameter(f"empty action grid for state {i}")
            if len(set(g)) != len(g):
                raise InvalidParameter(f"duplicate actions for state {i}: {g}")
        object.__setattr__(self, "per_state", grids)

    @property
    def max_actions(self) -> int:
        return max(len(g) for g in self.per_state)

    @cached_property
    def mask(self) -> np.ndarray:
        m = np.zeros((len(self.per_state), self.max_actions), dtype=bool)
        for i, g in enumerate(self.per_state):
            m[i, : len(g)] = True
        return m

    @cached_property
    def counts(self) -> np.ndarray:
        return np.array([len(g) for g in self.per_state], dtype=np.int64)

    def index(self, i: int, action) -> int:
        grid = self.per_state[i]
        try:
            return grid.index(action)
        except ValueError:
            # numeric grids: tolerate float round-off on lookup
            for k, a in enumerate(grid):
                if isinstance(a, (int, float)) and isinstance(action, (int, float)) and math.isclose(a, action, abs_tol=1e-12):
                    return k
            raise InvalidParameter(f"action {action!r} not admissible in state {i}") from None

    def dirac(self, choice: Mapping[int, object] | None = None) -> np.ndarray:
        """Per-state Dirac profile; states absent from ``choice`` get their first action."""
        w = np.zeros(self.mask.shape)
        w[:, 0] = 1.0
        for i, a in (choice or {}).items():
            w[i, :] = 0.0
            w[i, self.index(i, a)] = 1.0
        return w


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Occupation counts of N agents; a point of the lattice P_N(S)."""

    counts: tuple

    def __post_init__(self):
        c = tuple(int(x) for x in self.counts)
        if any(x < 0 for x in c):
            raise InvalidParameter(f"negative count in {c}")
        if sum(c) <= 0:
            raise InvalidParameter("empirical measure needs at least one agent")
        object.__setattr__(self, "counts", c)

    @property
    def N(self) -> int:
        return sum(self.counts)

    @property
    def fractions(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float) / self.N

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    def transition(self, i: int, j: int) -> "EmpiricalMeasure":
        return measure_transition(self, i, j)

    @classmethod
    def from_joint(cls, x: Sequence[int], n_states: int) -> "EmpiricalMeasure":
        return cls(tuple(np.bincount(np.asarray(x, dtype=np.int64), minlength=n_states)))


def measure_transition(mu: EmpiricalMeasure, i: int, j: int) -> EmpiricalMeasure:
    """Move one agent from state ``i`` to state ``j``."""
    if i == j:
        raise SameState(f"transition {i}->{j} is not a move")
    if mu.counts[i] == 0:
        raise EmptySourceState(f"no agent in state {i}")
    c = list(mu.counts)
    c[i] -= 1
    c[j] += 1
    return EmpiricalMeasure(tuple(c))


def round_measure(mu0: Sequence[float], N: int, mode: str = "deterministic", rng: np.random.Generator | None = None) -> EmpiricalMeasure:
    """Place ``N`` agents according to ``mu0``.

    ``deterministic`` uses largest-remainder rounding (ties to the lower
    index); ``stochastic`` samples each agent i.i.d. from ``mu0``.
    """
    p = np.asarray(mu0, dtype=float)
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidParameter(f"not a probability vector: {mu0}")
    p = np.clip(p, 0.0, None)
    p = p / p.sum()
    if mode == "stochastic":
        if rng is None:
            raise InvalidParameter("stochastic rounding needs an rng")
        return EmpiricalMeasure(tuple(rng.multinomial(N, p)))
    if mode != "deterministic":
        raise InvalidParameter(f"unknown rounding mode {mode!r}")
    scaled = p * N
    base = np.floor(scaled + 1e-12).astype(np.int64)
    rest = N - int(base.sum())
    order = sorted(range(len(p)), key=lambda k: (-(scaled[k] - base[k]), k))
    for k in order[:rest]:
        base[k] += 1
    return EmpiricalMeasure(tuple(base))


def check_profile(model: "ModelSpec", weights, tol: float = 1e-12) -> np.ndarray:
    """Validate a per-state action-distribution array of shape (|S|, max_actions)."""
    w = np.asarray(weights, dtype=float)
    mask = model.actions.mask
    if w.shape != mask.shape:
        raise InvalidParameter(f"profile shape {w.shape} != {mask.shape}")
    if np.any(w < -tol) or np.any(np.abs(w[~mask]) > tol):
        raise InvalidParameter("profile has negative or inadmissible weight")
    if np.any(np.abs(w.sum(axis=1) - 1.0) > max(tol, 1e-12)):
        raise InvalidParameter(f"profile rows must sum to 1: {w.sum(axis=1)}")
    return w


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A controlled mean-field CTMDP on a finite state space.

    ``rates``, ``rewards`` and ``terminal`` are pure functions of
    ``(mu, theta)``.  Built-in models use numba-compiled functions so the
    kernels can call them from nopython code; ``from_functions`` wraps plain
    Python callables instead.
    """

    name: str
    states: StateSpace
    actions: ActionGrid
    rates: Callable
    rewards: Callable
    terminal: Callable
    theta: np.ndarray
    beta: float
    horizon: float
    params: Mapping = field(default_factory=dict)
    # pairs (i, j): weights of action 1 in states i and j share one unit of capacity
    couplings: tuple = ()

    def __post_init__(self):
        if self.beta < 0:
            raise InvalidParameter("discount rate must be >= 0")
        if not (self.horizon > 0):
            raise InvalidParameter("horizon must be positive (math.inf for infinite)")
        if math.isinf(self.horizon) and self.beta <= 0:
            raise InvalidParameter("infinite horizon requires beta > 0")
        object.__setattr__(self, "theta", np.ascontiguousarray(self.theta, dtype=float))

    @property
    def n_states(self) -> int:
        return self.states.size

    @property
    def finite_horizon(self) -> bool:
        return not math.isinf(self.horizon)

    @property
    def compiled(self) -> bool:
        from ._backend import USE_NUMBA, is_compiled

        return USE_NUMBA and all(is_compiled(f) for f in (self.rates, self.rewards, self.terminal))

    def rate_tensor(self, mu) -> np.ndarray:
        return np.asarray(self.rates(np.asarray(mu, dtype=float), self.theta))

    def reward_tensor(self, mu) -> np.ndarray:
        return np.asarray(self.rewards(np.asarray(mu, dtype=float), self.theta))

    def terminal_reward(self, mu) -> float:
        return float(self.terminal(np.asarray(mu, dtype=float), self.theta))

    def intensity(self, i: int, a, mu) -> np.ndarray:
        """Row q(. | i, a, mu) for action value ``a``."""
        return self.rate_tensor(mu)[i, self.actions.index(i, a)].copy()

    def reward(self, i: int, a, mu) -> float:
        return float(self.reward_tensor(mu)[i, self.actions.index(i, a)])

    @cached_property
    def q_max(self) -> float:
        return validate_assumptions(self).q_max

    @cached_property
    def r_max(self) -> float:
        """sup |mu(i) r(i, a, mu)| over the default probe grid."""
        best = 0.0
        mask = self.actions.mask
        for mu in default_probe_grid(self.n_states):
            R = self.reward_tensor(mu)
            best = max(best, float(np.max(np.abs(mu[:, None] * R)[mask])))
        return best

    def replace(self, **changes) -> "ModelSpec":
        import dataclasses

        return dataclasses.replace(self, **changes)

    @classmethod
    def from_functions(
        cls,
        name: str,
        labels: Sequence,
        action_grid: Sequence[Sequence],
        intensity: Callable,
        reward: Callable,
        terminal: Callable | None = None,
        beta: float = 1.0,
        horizon: float = math.inf,
        params: Mapping | None = None,
    ) -> "ModelSpec":
        """Build a model from scalar callables ``intensity(i, a, mu) -> row`` and
        ``reward(i, a, mu) -> float`` (``a`` is the action value)."""
        states = StateSpace(tuple(labels))
        actions = ActionGrid(tuple(tuple(g) for g in action_grid))
        S, A = states.size, actions.max_actions
        grids = actions.per_state

        def rates(mu, theta):
            Q = np.zeros((S, A, S))
            for i in range(S):
                for k, a in enumerate(grids[i]):
                    Q[i, k] = intensity(i, a, mu)
            return Q

        def rewards(mu, theta):
            R = np.zeros((S, A))
            for i in range(S):
                for k, a in enumerate(grids[i]):
                    R[i, k] = reward(i, a, mu)
            return R

        term = terminal or (lambda mu: 0.0)

        def terminal_fn(mu, theta):
            return float(term(mu))

        return cls(name, states, actions, rates, rewards, terminal_fn, np.zeros(0), beta, horizon, dict(params or {}))


# --------------------------------------------------------------------------
# assumption validation


def lattice_points(M: int, S: int):
    """All count vectors of length S summing to M (any order)."""
    for bars in itertools.combinations(range(M + S - 1), S - 1):
        prev = -1
        c = []
        for b in bars:
            c.append(b - prev - 1)
            prev = b
        c.append(M + S - 1 - prev - 1)
        yield c


def default_probe_grid(S: int, M: int = 8) -> list[np.ndarray]:
    """Vertices, the uniform measure and the lattice P_M(S)."""
    pts = [np.eye(S)[k] for k in range(S)]
    pts.append(np.full(S, 1.0 / S))
    pts.extend(np.asarray(c, dtype=float) / M for c in lattice_points(M, S))
    return pts


@dataclass
class ValidationReport:
    q1_ok: bool
    q2_ok: bool
    q3_ok: bool
    q_max: float
    worst_negative_offdiag: float
    worst_row_sum: float
    rewards_finite: bool
    lipschitz_mu: float
    lipschitz_action: float
    warnings: list = field(default_factory=list)
    n_probes: int = 0

    @property
    def ok(self) -> bool:
        return self.q1_ok and self.q2_ok and self.q3_ok and self.rewards_finite

    def as_dict(self) -> dict:
        return {
            "ok": self.ok,
            "Q1": self.q1_ok,
            "Q2": self.q2_ok,
            "Q3": self.q3_ok,
            "q_max": self.q_max,
            "worst_negative_offdiag": self.worst_negative_offdiag,
            "worst_row_sum": self.worst_row_sum,
            "rewards_finite": self.rewards_finite,
            "lipschitz_mu_estimate": self.lipschitz_mu,
            "lipschitz_action_estimate": self.lipschitz_action,
            "warnings": list(self.warnings),
            "n_probes": self.n_probes,
        }


def validate_assumptions(model: ModelSpec, probe_grid: Sequence | None = None, tol: float = 1e-12) -> ValidationReport:
    """Probe (Q1)-(Q3) on a grid of measures; (Q4)/(Q5) only as diagnostics."""
    S = model.n_states
    mask = model.actions.mask
    probes = [np.asarray(p, dtype=float) for p in (probe_grid if probe_grid is not None else default_probe_grid(S))]
    if not probes:
        raise InvalidParameter("probe grid is empty")
    offdiag = ~np.eye(S, dtype=bool)
    q_max = 0.0
    worst_neg = 0.0
    worst_sum = 0.0
    finite_r = True
    lip_mu = 0.0
    h = 1e-6
    for mu in probes:
        Q = model.rate_tensor(mu)
        R = model.reward_tensor(mu)
        Qv = Q[mask]  # (n_pairs, S)
        rows_i = np.nonzero(mask)[0]
        off = Qv[offdiag[rows_i]]
        if off.size:
            worst_neg = max(worst_neg, float(-off.min()))
        worst_sum = max(worst_sum, float(np.max(np.abs(Qv.sum(axis=1)))))
        if not np.all(np.isfinite(Qv)):
            q_max = math.inf
        else:
            q_max = max(q_max, float(np.max(np.abs(Qv))))
        if not np.all(np.isfinite(R[mask])):
            finite_r = False
        # finite-difference Lipschitz estimate in mu along e_j - e_i
        for i in range(S):
            if mu[i] < h:
                continue
            for j in range(S):
                if i == j:
                    continue
                nu = mu.copy()
                nu[i] -= h
                nu[j] += h
                dq = np.max(np.abs(model.rate_tensor(nu)[mask] - Qv)) / (2 * h)  # TV distance of the step is h
                lip_mu = max(lip_mu, float(dq))
    lip_a = 0.0
    for mu in probes[: S + 1]:
        Q = model.rate_tensor(mu)
        for i, grid in enumerate(model.actions.per_state):
            if len(grid) < 2 or not all(isinstance(a, (int, float)) for a in grid):
                continue
            vals = np.asarray(grid, dtype=float)
            dq = np.abs(np.diff(Q[i, : len(grid)], axis=0)).max(axis=1) / np.maximum(np.abs(np.diff(vals)), 1e-300)
            lip_a = max(lip_a, float(dq.max()))
    warnings = []
    if lip_mu > 1e4:
        warnings.append(f"(Q4) large finite-difference slope in mu: {lip_mu:.3g}")
    if lip_a > 1e4:
        warnings.append(f"(Q5) large finite-difference slope in the action: {lip_a:.3g}")
    return ValidationReport(
        q1_ok=worst_neg <= tol,
        q2_ok=worst_sum <= max(tol, 1e-12),
        q3_ok=math.isfinite(q_max),
        q_max=q_max,
        worst_negative_offdiag=worst_neg,
        worst_row_sum=worst_sum,
        rewards_finite=finite_r,
        lipschitz_mu=lip_mu,
        lipschitz_action=lip_a,
        warnings=warnings,
        n_probes=len(probes),
    )


# --------------------------------------------------------------------------
# policy lifting


def lift_policy(rule, x: Sequence[int], n_states: int, states: Sequence[int] | None = None) -> np.ndarray:
    """Aggregate per-agent action kernels into one distribution per state.

    ``rule`` is either a callable ``rule(k, x) -> weights`` or a sequence of
    per-agent weight vectors (over the action grid of the agent's state).
    Entry ``i`` of the result is the equal-weight mixture of the kernels of
    the agents currently in state ``i``.  Fractions in, Fractions out.

    With ``states=None`` every occupied state is lifted and empty states get
    the first action (they carry no rate).  Explicitly requesting an empty
    state raises ``EmptySourceState``.
    """
    x = [int(s) for s in x]
    kernels = [list(rule(k, x)) if callable(rule) else list(rule[k]) for k in range(len(x))]
    width = max(len(w) for w in kernels)
    exact = any(isinstance(v, Fraction) for w in kernels for v in w)
    zero = Fraction(0) if exact else 0.0
    acc = [[zero] * width for _ in range(n_states)]
    n = [0] * n_states
    for k, s in enumerate(x):
        n[s] += 1
        for a, v in enumerate(kernels[k]):
            acc[s][a] += v
    requested = range(n_states) if states is None else states
    if states is not None:
        for i in requested:
            if n[i] == 0:
                raise EmptySourceState(f"no agent in state {i}")
    out = []
    for i in range(n_states):
        if n[i] == 0:
            row = [zero] * width
            row[0] = Fraction(1) if exact else 1.0
        else:
            row = [v / n[i] for v in acc[i]]
        out.append(row)
    return np.array(out, dtype=object if exact else float)


# --------------------------------------------------------------------------
# relaxed control paths


class RelaxedControlPath:
    """Piecewise-constant map t -> per-state action distribution.

    ``breakpoints[k]`` is the start of segment ``k``; segment ``k`` holds
    ``weights[k]`` (shape (|S|, max_actions)) on [breakpoints[k], breakpoints[k+1]),
    the last one up to ``horizon``.
    """

    def __init__(self, breakpoints, weights, horizon: float):
        b = np.asarray(breakpoints, dtype=float)
        w = np.asarray(weights, dtype=float)
        if b.ndim != 1 or b.size == 0 or b[0] != 0.0:
            raise InvalidParameter("breakpoints must be a non-empty list starting at 0")
        if np.any(np.diff(b) <= 0):
            raise InvalidParameter("breakpoints must be strictly increasing")
        if w.ndim != 3 or w.shape[0] != b.size:
            raise InvalidParameter(f"weights shape {w.shape} does not match {b.size} segments")
        if np.any(w < -1e-12) or np.any(np.abs(w.sum(axis=2) - 1.0) > 1e-9):
            raise InvalidParameter("every segment must hold probability vectors")
        if not (horizon > b[-1]):
            raise InvalidParameter("horizon must exceed the last breakpoint")
        self.breakpoints = b
        self.weights = np.clip(w, 0.0, None)
        self.horizon = float(horizon)

    @classmethod
    def constant(cls, weights, horizon: float) -> "RelaxedControlPath":
        w = np.asarray(weights, dtype=float)
        return cls([0.0], w[None], horizon)

    @classmethod
    def from_segments(cls, segments: Sequence[tuple], horizon: float) -> "RelaxedControlPath":
        """``segments`` = [(start_time, weights), ...] in increasing order; drops empty ones."""
        b, w = [], []
        for t, W in segments:
            if t >= horizon:
                continue
            if b and t <= b[-1]:
                if t == b[-1]:
                    w[-1] = W
                    continue
                raise InvalidParameter("segment starts must increase")
            b.append(float(t))
            w.append(np.asarray(W, dtype=float))
        return cls(b, np.array(w), horizon)

    @property
    def n_segments(self) -> int:
        return self.breakpoints.size

    @property
    def shape(self) -> tuple:
        return self.weights.shape[1:]

    def segment_index(self, t: float) -> int:
        return int(np.searchsorted(self.breakpoints, t, side="right") - 1)

    def at(self, t: float) -> np.ndarray:
        return self.weights[max(self.segment_index(t), 0)]

    def validate_for(self, model: ModelSpec) -> None:
        if self.shape != model.actions.mask.shape:
            raise InvalidParameter(f"control shape {self.shape} does not match model {model.actions.mask.shape}")
        if np.any(self.weights[:, ~model.actions.mask] > 1e-12):
            raise InvalidParameter("control puts weight on inadmissible actions")

    def switch_times(self, tol: float = 0.0) -> np.ndarray:
        """Breakpoints where the profile changes by more than ``tol`` in total variation."""
        if self.n_segments == 1:
            return np.zeros(0)
        tv = 0.5 * np.abs(np.diff(self.weights, axis=0)).sum(axis=2).max(axis=1)
        return self.breakpoints[1:][tv > tol]

    def restricted(self, horizon: float) -> "RelaxedControlPath":
        keep = self.breakpoints < horizon
        return RelaxedControlPath(self.breakpoints[keep], self.weights[keep], horizon)

    def to_rows(self, model: ModelSpec | None = None) -> list[dict]:
        rows = []
        for k in range(self.n_segments):
            row = {"t": float(self.breakpoints[k])}
            S, A = self.shape
            for i in range(S):
                for a in range(A):
                    if model is None or model.actions.mask[i, a]:
                        row[f"w_{i}_{a}"] = float(self.weights[k, i, a])
            rows.append(row)
        return rows

    def __repr__(self):
        return f"RelaxedControlPath(segments={self.n_segments}, horizon={self.horizon})"
