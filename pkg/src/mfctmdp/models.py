"""Built-in models and the name -> model registry.

Each model's rate, reward and terminal functions are numba-compiled (when
the numba backend is on) and read their numeric parameters from ``theta``.
Defaults reproduce the published parameter sets.
"""
from __future__ import annotations

import math
from typing import Callable, Mapping

import numpy as np

from ._backend import njit
from .errors import InvalidParameter, UnknownModel
from .model import ActionGrid, ModelSpec, StateSpace, validate_assumptions

__all__ = ["registry_get", "MODEL_NAMES", "DEFAULTS", "initial_measure", "priority_feedback", "fluid_priority", "fluid_priority_theta"]


# ---------------------------------------------------------------- machine replacement
# states: 0 working, 1 broken; actions in state 1: 0 do nothing, 1 repair
# theta = [C, g, lambda_wb, lambda_bw, per_broken]


@njit(cache=True)
def _mr_rates(mu, theta):
    Q = np.zeros((2, 2, 2))
    Q[0, 0, 1] = theta[2]
    Q[0, 0, 0] = -theta[2]
    Q[1, 1, 0] = theta[3]
    Q[1, 1, 1] = -theta[3]
    return Q


@njit(cache=True)
def _mr_rewards(mu, theta):
    R = np.zeros((2, 2))
    R[0, 0] = theta[1]
    if theta[4] > 0.5:
        R[1, 1] = -theta[0]
    else:
        # cost C per repair call, shared by the broken machines
        broken = 1.0 - mu[0]
        R[1, 1] = -theta[0] / broken if broken > 0.0 else -theta[0]
    return R


@njit(cache=True)
def _zero_terminal(mu, theta):
    return 0.0


def _machine_replacement(p: Mapping) -> ModelSpec:
    conv = p["repair_cost"]
    if conv not in ("per_call", "per_broken"):
        raise InvalidParameter(f"repair_cost must be 'per_call' or 'per_broken', got {conv!r}")
    theta = np.array([p["C"], p["g"], p["lambda_wb"], p["lambda_bw"], 1.0 if conv == "per_broken" else 0.0])
    return ModelSpec(
        name="machine_replacement",
        states=StateSpace(("working", "broken")),
        actions=ActionGrid(((0,), (0, 1))),
        rates=_mr_rates,
        rewards=_mr_rewards,
        terminal=_zero_terminal,
        theta=theta,
        beta=float(p["beta"]),
        horizon=float(p["T"]),
        params=dict(p),
    )


# ---------------------------------------------------------------- SIR malware
# states: 0 S, 1 I, 2 D, 3 R; kill rate a in state I on a uniform grid over [0, a_bar]
# theta = [lambda_SI, lambda_SR, lambda_IR, a_bar, T, n_actions]


@njit(cache=True)
def _sir_rates(mu, theta):
    n = int(theta[5])
    Q = np.zeros((4, n, 4))
    inf = theta[0] * max(mu[1], 0.0)
    Q[0, 0, 1] = inf
    Q[0, 0, 3] = theta[1]
    Q[0, 0, 0] = -(inf + theta[1])
    for k in range(n):
        a = theta[3] * k / (n - 1) if n > 1 else theta[3]
        Q[1, k, 2] = a
        Q[1, k, 3] = theta[2]
        Q[1, k, 1] = -(a + theta[2])
    return Q


@njit(cache=True)
def _sir_rewards(mu, theta):
    n = int(theta[5])
    R = np.zeros((4, n))
    v = mu[1] * mu[1] / theta[4]
    R[0, 0] = v
    R[2, 0] = v
    R[3, 0] = v
    for k in range(n):
        R[1, k] = v
    return R


@njit(cache=True)
def _sir_terminal(mu, theta):
    return mu[2]


def _sir_malware(p: Mapping) -> ModelSpec:
    n = int(p["n_actions"])
    if n < 2:
        raise InvalidParameter("n_actions must be >= 2")
    grid = tuple(float(p["a_bar"]) * k / (n - 1) for k in range(n))
    theta = np.array([p["lambda_SI"], p["lambda_SR"], p["lambda_IR"], p["a_bar"], p["T"], n], dtype=float)
    return ModelSpec(
        name="sir_malware",
        states=StateSpace(("S", "I", "D", "R")),
        actions=ActionGrid(((0,), grid, (0,), (0,))),
        rates=_sir_rates,
        rewards=_sir_rewards,
        terminal=_sir_terminal,
        theta=theta,
        beta=float(p["beta"]),
        horizon=float(p["T"]),
        params=dict(p),
    )


# ---------------------------------------------------------------- resource competition
# states 1..8 -> indices 0..7; lines 1->2->3->4 and 5->6->7->8
# actions {0, 1} (activation) in states 2, 3, 6, 7
# theta = [l1, l2, l3, l5, l6, l7, cost_low, cost_high]


@njit(cache=True)
def _rc_rates(mu, theta):
    Q = np.zeros((8, 2, 8))
    Q[0, 0, 1] = theta[0]
    Q[0, 0, 0] = -theta[0]
    Q[1, 1, 2] = theta[1]
    Q[1, 1, 1] = -theta[1]
    Q[2, 1, 3] = theta[2]
    Q[2, 1, 2] = -theta[2]
    Q[4, 0, 5] = theta[3]
    Q[4, 0, 4] = -theta[3]
    Q[5, 1, 6] = theta[4]
    Q[5, 1, 5] = -theta[4]
    Q[6, 1, 7] = theta[5]
    Q[6, 1, 6] = -theta[5]
    return Q


@njit(cache=True)
def _rc_rewards(mu, theta):
    R = np.zeros((8, 2))
    for i in (0, 1, 4, 5):
        R[i, 0] = -theta[6]
        R[i, 1] = -theta[6]
    for i in (2, 6):
        R[i, 0] = -theta[7]
        R[i, 1] = -theta[7]
    # padded slot of uncontrolled states stays unused
    R[0, 1] = 0.0
    R[4, 1] = 0.0
    return R


def _resource_competition(p: Mapping) -> ModelSpec:
    theta = np.array(
        [p["lambda_1"], p["lambda_2"], p["lambda_3"], p["lambda_5"], p["lambda_6"], p["lambda_7"], p["cost_low"], p["cost_high"]],
        dtype=float,
    )
    on_off = (0, 1)
    return ModelSpec(
        name="resource_competition",
        states=StateSpace((1, 2, 3, 4, 5, 6, 7, 8)),
        actions=ActionGrid(((0,), on_off, on_off, (0,), (0,), on_off, on_off, (0,))),
        rates=_rc_rates,
        rewards=_rc_rewards,
        terminal=_zero_terminal,
        theta=theta,
        beta=float(p["beta"]),
        horizon=float(p["T"]),
        params=dict(p),
        # (state 2, state 7) and (state 3, state 6) share one server each
        couplings=((1, 6), (2, 5)),
    )


@njit(cache=True)
def priority_feedback(counts, N, theta):
    """N-agent priority rule; theta = [threshold as a population fraction].

    State 7 is served before state 2 and state 3 before state 6 while the
    priority state holds at least one agent and at least ``threshold * N``.
    Otherwise the server goes entirely to the other state.
    """
    W = np.zeros((8, 2))
    W[0, 0] = 1.0
    W[3, 0] = 1.0
    W[4, 0] = 1.0
    W[7, 0] = 1.0
    thr = theta[0] * N
    if counts[6] > 0 and counts[6] >= thr:
        W[6, 1] = 1.0
        W[1, 0] = 1.0
    else:
        W[1, 1] = 1.0
        W[6, 0] = 1.0
    if counts[2] > 0 and counts[2] >= thr:
        W[2, 1] = 1.0
        W[5, 0] = 1.0
    else:
        W[5, 1] = 1.0
        W[2, 0] = 1.0
    return W


@njit(cache=True)
def fluid_priority(mu, theta):
    """Priority rule for the mean-field limit; theta = [threshold, l2, l3, l6, l7].

    A priority state above the threshold gets the full server.  At the
    threshold it gets just enough service to stay there (outflow = inflow)
    and the rest of the server goes to the other state.
    """
    thr, l2, l3, l6, l7 = theta[0], theta[1], theta[2], theta[3], theta[4]
    above3 = mu[2] > thr * (1.0 + 1e-9)
    above7 = mu[6] > thr * (1.0 + 1e-9)
    # x: share of server B on state 3, y: share of server A on state 7
    c2 = l2 * mu[1] / (l3 * thr)
    c6 = l6 * mu[5] / (l7 * thr)
    if above3 and above7:
        x, y = 1.0, 1.0
    elif above3:
        x = 1.0
        y = min(1.0, c6 * (1.0 - x))
    elif above7:
        y = 1.0
        x = min(1.0, c2 * (1.0 - y))
    else:
        # both held: x = min(1, c2 (1 - y)), y = min(1, c6 (1 - x))
        den = 1.0 - c2 * c6
        x = -1.0
        if den != 0.0:
            x = c2 * (1.0 - c6) / den
            y = c6 * (1.0 - x)
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            if c6 >= 1.0:
                x, y = 0.0, 1.0
            else:
                x, y = 1.0, 0.0
    W = np.zeros((8, 2))
    W[0, 0] = 1.0
    W[3, 0] = 1.0
    W[4, 0] = 1.0
    W[7, 0] = 1.0
    W[6, 1] = y
    W[6, 0] = 1.0 - y
    W[1, 1] = 1.0 - y
    W[1, 0] = y
    W[2, 1] = x
    W[2, 0] = 1.0 - x
    W[5, 1] = 1.0 - x
    W[5, 0] = x
    return W


def fluid_priority_theta(model: ModelSpec) -> np.ndarray:
    p = model.params
    return np.array([p["priority_threshold"], p["lambda_2"], p["lambda_3"], p["lambda_6"], p["lambda_7"]])


# ---------------------------------------------------------------- cube-root example
# states "1" (absorbing) and "2" -> indices 0, 1; uncontrolled
# theta = [cap_level]


@njit(cache=True)
def _cube_rates(mu, theta):
    Q = np.zeros((2, 1, 2))
    m = max(mu[0], 0.0)
    cap = theta[0]
    if m <= cap:
        q = m ** (1.0 / 3.0) / (1.0 - m)
    else:
        q = cap ** (1.0 / 3.0) / (1.0 - cap)
    Q[1, 0, 0] = q
    Q[1, 0, 1] = -q
    return Q


@njit(cache=True)
def _cube_rewards(mu, theta):
    R = np.zeros((2, 1))
    R[0, 0] = 1.0
    return R


def _cube_root(p: Mapping) -> ModelSpec:
    if not (0.0 < p["cap"] < 1.0):
        raise InvalidParameter("cap must lie in (0, 1)")
    return ModelSpec(
        name="cube_root",
        states=StateSpace((1, 2)),
        actions=ActionGrid(((0,), (0,))),
        rates=_cube_rates,
        rewards=_cube_rewards,
        terminal=_zero_terminal,
        theta=np.array([p["cap"]]),
        beta=float(p["beta"]),
        horizon=float(p["T"]),
        params=dict(p),
    )


# ---------------------------------------------------------------- registry

DEFAULTS: dict[str, dict] = {
    "machine_replacement": {
        "C": 1.0,
        "g": 2.0,
        "lambda_wb": 1.0,
        "lambda_bw": 2.0,
        "T": 4.0,
        "beta": 0.0,
        "repair_cost": "per_call",
        "mu0": [1.0, 0.0],
    },
    "sir_malware": {
        "lambda_SI": 0.6,
        "lambda_SR": 0.2,
        "lambda_IR": 0.2,
        "a_bar": 1.0,
        "T": 10.0,
        "beta": 0.0,
        "I0": 0.01,
        "n_actions": 101,
    },
    "resource_competition": {
        "lambda_1": 1.0,
        "lambda_2": 6.0,
        "lambda_3": 1.5,
        "lambda_5": 1.0,
        "lambda_6": 6.0,
        "lambda_7": 1.5,
        "priority_threshold": 1e-4,
        "cost_low": 1.0,
        "cost_high": 2.0,
        "T": 10.0,
        "beta": 0.0,
        "mu0": [5 / 14, 1 / 14, 1 / 14, 0.0, 5 / 14, 1 / 14, 1 / 14, 0.0],
    },
    "cube_root": {
        "cap": 0.99,
        "T": 2.0,
        "beta": 0.0,
        "mu0": [0.0, 1.0],
    },
}

_BUILDERS: dict[str, Callable[[Mapping], ModelSpec]] = {
    "machine_replacement": _machine_replacement,
    "sir_malware": _sir_malware,
    "resource_competition": _resource_competition,
    "cube_root": _cube_root,
}

MODEL_NAMES = tuple(_BUILDERS)

_NONNEGATIVE = {
    "C", "g", "lambda_wb", "lambda_bw", "lambda_SI", "lambda_SR", "lambda_IR", "a_bar",
    "lambda_1", "lambda_2", "lambda_3", "lambda_5", "lambda_6", "lambda_7", "priority_threshold", "beta",
}


def _coerce(key: str, old, new):
    if isinstance(old, str):
        return str(new)
    if isinstance(old, list):
        return [float(v) for v in (new if not isinstance(new, str) else new.split(","))]
    if key == "n_actions":
        return int(new)
    return float(new)


def registry_get(name: str, params: Mapping | None = None, strict: bool = True) -> ModelSpec:
    """Instantiate a built-in model with its published defaults plus ``params``.

    ``strict=False`` skips parameter-sign checks and assumption validation so a
    deliberately broken model can still be handed to ``validate_assumptions``.
    """
    if name not in _BUILDERS:
        raise UnknownModel(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    p = {k: (list(v) if isinstance(v, list) else v) for k, v in DEFAULTS[name].items()}
    for key, value in (params or {}).items():
        if key not in p:
            raise InvalidParameter(f"model {name} has no parameter {key!r}")
        try:
            p[key] = _coerce(key, p[key], value)
        except (TypeError, ValueError) as exc:
            raise InvalidParameter(f"bad value for {key}: {value!r}") from exc
    if strict:
        for key in _NONNEGATIVE & p.keys():
            if p[key] < 0:
                raise InvalidParameter(f"{key} must be nonnegative, got {p[key]}")
        if p["T"] <= 0:
            raise InvalidParameter("T must be positive")
    if name == "sir_malware":
        I0 = p["I0"]
        if not (0.0 <= I0 <= 1.0):
            raise InvalidParameter("I0 must lie in [0, 1]")
        p["mu0"] = [1.0 - I0, I0, 0.0, 0.0]
    if "mu0" in p and (len(p["mu0"]) == 0 or abs(sum(p["mu0"]) - 1.0) > 1e-9):
        raise InvalidParameter(f"mu0 must be a probability vector: {p['mu0']}")
    model = _BUILDERS[name](p)
    if strict:
        report = validate_assumptions(model)
        if not report.ok:
            raise InvalidParameter(f"model {name} violates (Q1)-(Q3): {report.as_dict()}")
        # share the probe with later q_max lookups
        model.__dict__["q_max"] = report.q_max
    return model


def initial_measure(model: ModelSpec) -> np.ndarray:
    return np.asarray(model.params["mu0"], dtype=float)


def is_finite_horizon(model: ModelSpec) -> bool:
    return not math.isinf(model.horizon)
