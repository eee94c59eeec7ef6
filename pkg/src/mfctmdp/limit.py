"""Deterministic mean-field limit: integration, objective, adjoint, optimizers."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import kernels as K
from .errors import InvalidParameter, ProjectionTooLarge
from .grids import check_grid, make_time_grid, step_profiles
from .model import ModelSpec, RelaxedControlPath, check_profile

__all__ = [
    "LimitTrajectory",
    "Adjoint",
    "PontryaginCheck",
    "OptimizeResult",
    "SwitchFamily",
    "limit_rhs",
    "integrate_limit",
    "integrate_limit_feedback",
    "objective_F",
    "adjoint_integrate",
    "pontryagin_residual",
    "switch_family",
    "optimize_switching",
    "optimize_direct",
    "project_simplex",
    "DEFAULT_STEPS",
    "CLIP_TOL",
]

DEFAULT_STEPS = 2000
CLIP_TOL = 1e-6
TRUNCATION_EXPONENT = 30.0


@dataclass
class LimitTrajectory:
    times: np.ndarray
    states: np.ndarray  # (n+1, S)
    controls: np.ndarray  # (n, S, A), profile on each step
    running: np.ndarray  # accumulated discounted running reward at each node
    value: float
    max_projection: float

    def at(self, t) -> np.ndarray:
        """Linear interpolation between nodes."""
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, self.times, self.states[:, j]) for j in range(self.states.shape[1])], axis=-1)

    def to_csv(self, path, model: ModelSpec | None = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        S = self.states.shape[1]
        A = self.controls.shape[2]
        mask = model.actions.mask if model is not None else np.ones((S, A), bool)
        cols = [(i, a) for i in range(S) for a in range(A) if mask[i, a]]
        head = ["t"] + [f"mu_{i}" for i in range(S)] + [f"w_{i}_{a}" for i, a in cols]
        lines = [",".join(head)]
        for k, t in enumerate(self.times):
            W = self.controls[min(k, self.controls.shape[0] - 1)]
            lines.append(",".join([repr(float(t))] + [repr(float(x)) for x in self.states[k]] + [repr(float(W[i, a])) for i, a in cols]))
        path.write_text("\n".join(lines) + "\n")
        return path


def _horizon(model: ModelSpec) -> float:
    return model.horizon if model.finite_horizon else TRUNCATION_EXPONENT / model.beta


def limit_rhs(model: ModelSpec, mu, alpha) -> np.ndarray:
    """f_j = sum_i mu(i) sum_a q(j|i,a,mu) alpha_i(a)."""
    W = np.ascontiguousarray(check_profile(model, alpha))
    kern = K.select("limit_drift", model.rates)
    return np.asarray(kern(model.rates, model.theta, np.ascontiguousarray(mu, dtype=float), W))


def _resolve_grid(model, control: RelaxedControlPath, time_grid):
    T = _horizon(model)
    if time_grid is None:
        return make_time_grid(T, n_steps=DEFAULT_STEPS, breakpoints=control.breakpoints[1:])
    if isinstance(time_grid, (int, np.integer)):
        return make_time_grid(T, n_steps=int(time_grid), breakpoints=control.breakpoints[1:])
    return check_grid(time_grid, T, control.breakpoints[1:])


def integrate_limit(model: ModelSpec, mu0, control: RelaxedControlPath, time_grid=None, clip_tol: float = CLIP_TOL) -> LimitTrajectory:
    """Fixed-step RK4 of the mean-field ODE with clip-and-renormalize after each step.

    ``time_grid`` is None (T/2000 steps with breakpoints inserted), a step
    count, or explicit nodes that include every control breakpoint.
    """
    control.validate_for(model)
    grid = _resolve_grid(model, control, time_grid)
    if control.horizon < grid[-1] - 1e-12:
        raise InvalidParameter("control does not cover the time grid")
    W = step_profiles(control, grid)
    mu0 = np.ascontiguousarray(mu0, dtype=float)
    if mu0.shape != (model.n_states,) or abs(mu0.sum() - 1.0) > 1e-9 or np.any(mu0 < 0):
        raise InvalidParameter(f"mu0 must be a probability vector on {model.n_states} states")
    kern = K.select("ode_rk4", model.rates, model.rewards)
    traj, acc, worst, status = kern(model.rates, model.rewards, model.theta, mu0, grid, W, model.beta, clip_tol)
    if status >= 0:
        raise ProjectionTooLarge(f"simplex projection {worst:.3g} > {clip_tol} at t={grid[status]:.6g}")
    value = float(acc[-1])
    if model.finite_horizon:
        value += math.exp(-model.beta * grid[-1]) * model.terminal_reward(traj[-1])
    return LimitTrajectory(grid, traj, W, acc, value, float(worst))


def objective_F(model: ModelSpec, mu0, control: RelaxedControlPath, time_grid=None) -> float:
    """Discounted running reward (Simpson per step) plus discounted terminal reward."""
    return integrate_limit(model, mu0, control, time_grid).value


def integrate_limit_feedback(model: ModelSpec, mu0, rule: Callable, theta, time_grid=None) -> tuple[LimitTrajectory, RelaxedControlPath]:
    """Mean-field ODE under a measure feedback ``rule(mu, theta)``, held per step.

    Also returns the applied profiles as an open-loop path (one segment per step).
    """
    T = _horizon(model)
    grid = make_time_grid(T, n_steps=DEFAULT_STEPS) if time_grid is None else (
        make_time_grid(T, n_steps=int(time_grid)) if isinstance(time_grid, (int, np.integer)) else check_grid(time_grid, T))
    kern = K.select("ode_rk4_feedback", model.rates, model.rewards, rule)
    traj, acc, used = kern(model.rates, model.rewards, model.theta, rule, np.asarray(theta, dtype=float),
                           np.ascontiguousarray(mu0, dtype=float), grid, model.beta)
    value = float(acc[-1])
    if model.finite_horizon:
        value += math.exp(-model.beta * grid[-1]) * model.terminal_reward(traj[-1])
    path = RelaxedControlPath(grid[:-1], used, grid[-1])
    return LimitTrajectory(grid, traj, used, acc, value, 0.0), path


# --------------------------------------------------------------------------
# adjoint for the machine-replacement family


@dataclass
class Adjoint:
    times: np.ndarray
    p: np.ndarray


def _mr_params(model: ModelSpec):
    if model.name != "machine_replacement":
        raise InvalidParameter("the adjoint is available for the machine-replacement model only")
    C, g, lwb, lbw, per_broken = model.theta
    return C, g, lwb, lbw, per_broken > 0.5


def adjoint_integrate(model: ModelSpec, control: RelaxedControlPath, time_grid=None, trajectory: LimitTrajectory | None = None) -> Adjoint:
    """Co-state of the working fraction, backward RK4 from p(T) = 0.

    dp/dt = -g + p (lambda_wb + lambda_bw (1 - alpha0)) with alpha0 the
    weight of "do nothing" for broken machines; the per-broken cost
    convention adds -C (1 - alpha0).
    """
    C, g, lwb, lbw, per_broken = _mr_params(model)
    if model.beta != 0.0:
        raise InvalidParameter("the adjoint is implemented for beta = 0")
    grid = trajectory.times if trajectory is not None else _resolve_grid(model, control, time_grid)
    W = step_profiles(control, grid)
    idle = W[:, 1, 0]
    n = grid.size - 1
    p = np.zeros(n + 1)
    for k in range(n - 1, -1, -1):
        h = grid[k + 1] - grid[k]
        c = lwb + lbw * (1.0 - idle[k])
        src = -g - (C * (1.0 - idle[k]) if per_broken else 0.0)
        # linear in p with constant coefficients on the step: integrate backward in s = T - t
        f = lambda x: -(src + c * x)  # noqa: E731
        x = p[k + 1]
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        p[k] = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return Adjoint(grid, p)


@dataclass
class PontryaginCheck:
    times: np.ndarray
    residual: np.ndarray
    near_switch: np.ndarray
    max_residual: float
    max_off_switch: float


def pontryagin_residual(model: ModelSpec, control: RelaxedControlPath, trajectory: LimitTrajectory, adjoint: Adjoint, switch_tol: float = 1e-9) -> PontryaginCheck:
    """max_alpha H - H(applied alpha) at each node, using the profile of the step to the right.

    H is affine in the repair weight 1 - alpha0 with slope
    s = lambda_bw p (1 - mu0) - C (times 1 - mu0 under the per-broken convention),
    so the residual is max(0, s) - (1 - alpha0) s.
    """
    C, g, lwb, lbw, per_broken = _mr_params(model)
    t = trajectory.times
    if adjoint.times.shape != t.shape or np.any(adjoint.times != t):
        raise InvalidParameter("trajectory and adjoint must share the grid")
    mu0 = trajectory.states[:-1, 0]
    p = adjoint.p[:-1]
    broken = 1.0 - mu0
    s = lbw * p * broken - C * (broken if per_broken else 1.0)
    repair = 1.0 - trajectory.controls[:, 1, 0]
    res = np.maximum(s, 0.0) - repair * s
    switches = control.switch_times(switch_tol)
    near = np.zeros(t.size - 1, dtype=bool)
    steps = np.diff(t)
    for ts in switches:
        near |= np.abs(t[:-1] - ts) <= steps + 1e-12
    res = np.maximum(res, 0.0)
    off = res[~near]
    return PontryaginCheck(t[:-1], res, near, float(res.max()), float(off.max()) if off.size else 0.0)


# --------------------------------------------------------------------------
# switching-time optimization


@dataclass
class OptimizeResult:
    control: RelaxedControlPath
    value: float
    trajectory: LimitTrajectory
    parameters: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        out = {"parameters": self.parameters, "value": self.value, "diagnostics": self.diagnostics,
               "breakpoints": self.control.breakpoints.tolist(), "weights": self.control.weights.tolist()}
        path.write_text(json.dumps(out, indent=2, sort_keys=True, default=float) + "\n")
        return path


@dataclass(frozen=True)
class SwitchFamily:
    """Parametric control family: ``build(params) -> RelaxedControlPath``."""

    name: str
    names: tuple
    bounds: tuple
    build: Callable


def switch_family(model: ModelSpec, family: str) -> SwitchFamily:
    """Built-in families.

    ``one_switch``: lowest action in every state up to t1, then the highest
    action in the controlled states (the SIR form: no kill rate, then full).
    ``three_phase``: machine replacement; do nothing up to t1, repair with
    probability u until t2, then do nothing.
    """
    T = _horizon(model)
    A = model.actions
    if family == "one_switch":
        low = A.dirac()
        high = A.dirac({i: g[-1] for i, g in enumerate(A.per_state)})

        def build(p):
            t1 = min(max(p[0], 0.0), T)
            return RelaxedControlPath.from_segments([(0.0, low), (t1, high)], T) if t1 > 0 else RelaxedControlPath.constant(high, T)

        return SwitchFamily("one_switch", ("t1",), ((0.0, T),), build)
    if family == "three_phase":
        _mr_params(model)
        idle = A.dirac({1: 0})

        def build(p):
            t1, u, t2 = p
            t1 = min(max(t1, 0.0), T)
            t2 = min(max(t2, t1), T)
            mid = np.array([[1.0, 0.0], [1.0 - u, u]])
            return RelaxedControlPath.from_segments([(0.0, idle), (t1, mid), (t2, idle)], T)

        return SwitchFamily("three_phase", ("t1", "u", "t2"), ((0.0, T), (0.0, 1.0), (0.0, T)), build)
    raise InvalidParameter(f"unknown control family {family!r}")


_GR = (math.sqrt(5.0) - 1.0) / 2.0


def _maximize_1d(f, lo, hi, tol, n_coarse=11, n_dense=201):
    """Coarse scan, golden section around the best node when the scan is unimodal.

    Returns (argmax, value, evaluations, bracket_failure).
    """
    if hi - lo <= tol:
        x = 0.5 * (lo + hi) if hi > lo else lo
        return x, f(x), 1, False
    xs = np.linspace(lo, hi, n_coarse)
    ys = np.array([f(x) for x in xs])
    evals = n_coarse
    k = int(np.argmax(ys))
    rises = np.sign(np.diff(ys))
    rises = rises[rises != 0]
    unimodal = np.count_nonzero(np.diff(rises) < 0) + np.count_nonzero(np.diff(rises) > 0) <= 1 and not (
        rises.size and rises[0] < 0 and rises[-1] > 0)
    if not unimodal:
        xs = np.linspace(lo, hi, n_dense)
        ys = np.array([f(x) for x in xs])
        evals += n_dense
        k = int(np.argmax(ys))
    a = xs[max(k - 1, 0)]
    b = xs[min(k + 1, xs.size - 1)]
    c = b - _GR * (b - a)
    d = a + _GR * (b - a)
    fc, fd = f(c), f(d)
    evals += 2
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GR * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GR * (b - a)
            fd = f(d)
        evals += 1
    cands = [(ys[k], xs[k]), (fc, c), (fd, d)]
    best_y, best_x = max(cands, key=lambda z: z[0])
    return best_x, best_y, evals, not unimodal


def optimize_switching(model: ModelSpec, family: str | SwitchFamily, bounds: Sequence | None = None, mu0=None,
                       time_grid=None, tol: float = 1e-6, search_steps: int = 400) -> OptimizeResult:
    """Nested golden-section search over at most three family parameters.

    The outermost loop runs over the first parameter; each objective value is
    an ``objective_F`` evaluation on a grid of ``search_steps`` steps with the
    candidate's switch times as nodes (the integrand is smooth between nodes,
    so this coarse grid is accurate to ~1e-9).  The returned value is
    recomputed on the full grid.  Non-unimodal coarse scans fall back to a
    dense grid argmax and are flagged in the diagnostics.
    """
    fam = switch_family(model, family) if isinstance(family, str) else family
    bnds = tuple(tuple(map(float, b)) for b in (bounds or fam.bounds))
    if len(bnds) != len(fam.names) or len(bnds) > 3:
        raise InvalidParameter(f"family {fam.name} needs {len(fam.names)} bounds")
    if mu0 is None:
        mu0 = np.asarray(model.params["mu0"], dtype=float)
    mu0 = np.asarray(mu0, dtype=float)
    n_steps = DEFAULT_STEPS if time_grid is None else int(time_grid)
    T = _horizon(model)
    counter = {"evals": 0, "bracket_failures": 0}
    # search order: the held level of three_phase is innermost, after both switch times
    perm = (0, 2, 1) if fam.name == "three_phase" else tuple(range(len(bnds)))

    def unpermute(q):
        p = [0.0] * len(q)
        for level, idx in enumerate(perm):
            p[idx] = q[level]
        return p

    def J(q):
        counter["evals"] += 1
        ctrl = fam.build(unpermute(q))
        return objective_F(model, mu0, ctrl, make_time_grid(T, n_steps=min(search_steps, n_steps), breakpoints=ctrl.breakpoints[1:]))

    def solve(level, fixed):
        lo, hi = bnds[perm[level]]
        if fam.name == "three_phase" and level == 1:
            lo = max(lo, fixed[0])
        inner_tol = tol if level == 0 else max(tol, 1e-4)
        if level == len(bnds) - 1:
            x, y, _, bad = _maximize_1d(lambda x: J(fixed + [x]), lo, hi, inner_tol)
            counter["bracket_failures"] += int(bad)
            return [x], y
        best = {}

        def f(x):
            rest, y = solve(level + 1, fixed + [x])
            best[x] = rest
            return y

        x, y, _, bad = _maximize_1d(f, lo, hi, inner_tol)
        counter["bracket_failures"] += int(bad)
        if x not in best:
            f(x)
        return [x] + best[x], y

    q, _ = solve(0, [])
    params = unpermute(q)
    ctrl = fam.build(params)
    grid = make_time_grid(T, n_steps=n_steps, breakpoints=ctrl.breakpoints[1:])
    traj = integrate_limit(model, mu0, ctrl, grid)
    return OptimizeResult(
        control=ctrl,
        value=traj.value,
        trajectory=traj,
        parameters=dict(zip(fam.names, map(float, params))),
        diagnostics={"family": fam.name, "evaluations": counter["evals"], "bracket_failures": counter["bracket_failures"],
                     "tol": tol, "steps": n_steps},
    )


# --------------------------------------------------------------------------
# direct projected-gradient ascent


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row of ``v`` onto the probability simplex."""
    v = np.atleast_2d(v)
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, n + 1)
    cond = u - css / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(v.shape[0]), rho] / (rho + 1)
    return np.maximum(v - tau[:, None], 0.0)


def optimize_direct(model: ModelSpec, mu0=None, n_nodes: int = 40, init: RelaxedControlPath | None = None,
                    step: float = 1.0, max_iter: int = 200, gtol: float = 1e-7, ftol: float = 1e-10,
                    fd_eps: float = 1e-6, support: str = "all", time_grid: int | None = None) -> OptimizeResult:
    """Projected gradient ascent on piecewise-constant controls over ``n_nodes`` equal intervals.

    Free variables are the per-interval, per-state action weights (restricted
    to the first and last grid action with ``support="extremes"``).  Gradients
    are central finite differences; a step is accepted only if the objective
    increases, otherwise it is halved.
    """
    if not model.finite_horizon:
        raise InvalidParameter("direct optimization needs a finite horizon")
    T = model.horizon
    if mu0 is None:
        mu0 = np.asarray(model.params["mu0"], dtype=float)
    mu0 = np.asarray(mu0, dtype=float)
    S, A = model.actions.mask.shape
    counts = model.actions.counts
    if support == "extremes":
        cols = [sorted({0, int(c) - 1}) for c in counts]
    elif support == "all":
        cols = [list(range(int(c))) for c in counts]
    else:
        raise InvalidParameter(f"unknown support {support!r}")
    free = [i for i in range(S) if len(cols[i]) > 1]
    breaks = np.linspace(0.0, T, n_nodes + 1)[:-1]
    steps_per = max(1, (time_grid or DEFAULT_STEPS) // n_nodes)
    grid = make_time_grid(T, n_steps=steps_per * n_nodes, breakpoints=breaks[1:])
    if init is None:
        W = np.repeat(model.actions.dirac()[None], n_nodes, axis=0)
        for i in free:
            W[:, i, :] = 0.0
            W[:, i, cols[i]] = 1.0 / len(cols[i])
    else:
        W = np.array([init.at(b) for b in breaks])
    kern = K.select("ode_rk4", model.rates, model.rewards)
    Wg = np.empty((grid.size - 1, S, A))
    seg_of_step = np.minimum((np.searchsorted(breaks, 0.5 * (grid[:-1] + grid[1:]), side="right") - 1), n_nodes - 1)
    term_g = math.exp(-model.beta * T)

    def J(Wn):
        Wg[:] = Wn[seg_of_step]
        traj, acc, worst, status = kern(model.rates, model.rewards, model.theta, mu0, grid, Wg, model.beta, 1e-3)
        return float(acc[-1]) + term_g * model.terminal_reward(traj[-1])

    def project(Wn):
        out = Wn.copy()
        for i in free:
            c = cols[i]
            out[:, i, :] = 0.0
            out[:, i, c] = project_simplex(Wn[:, i, c])
        return out

    val = J(W)
    history = [val]
    flagged = False
    it = 0
    for it in range(1, max_iter + 1):
        G = np.zeros_like(W)
        for i in free:
            for a in cols[i]:
                for k in range(n_nodes):
                    old = W[k, i, a]
                    W[k, i, a] = old + fd_eps
                    up = J(W)
                    W[k, i, a] = old - fd_eps
                    dn = J(W)
                    W[k, i, a] = old
                    G[k, i, a] = (up - dn) / (2 * fd_eps)
        # projected-gradient stationarity measure
        pg = project(W + G) - W
        if np.max(np.abs(pg)) < gtol:
            break
        s = step
        accepted = False
        while s > 1e-12:
            cand = project(W + s * G)
            cv = J(cand)
            if cv > val:
                accepted = True
                break
            s *= 0.5
        if not accepted:
            break
        gain = cv - val
        W, val = cand, cv
        history.append(val)
        step = min(4.0 * s, 1e3)
        if gain < ftol:
            break
    else:
        flagged = True
    ctrl = RelaxedControlPath(breaks, W, T)
    traj = integrate_limit(model, mu0, ctrl, grid)
    return OptimizeResult(
        control=ctrl,
        value=traj.value,
        trajectory=traj,
        parameters={"n_nodes": n_nodes, "support": support},
        diagnostics={"iterations": it, "max_iterations": flagged, "history": history,
                     "projected_gradient": float(np.max(np.abs(pg))) if it else None},
    )
