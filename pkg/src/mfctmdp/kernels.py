"""Numeric inner loops.

Loops that call model functions (event simulation, RK4 in time, lattice
tensor assembly) are built twice from one source by ``_build``: compiled, and
as plain Python for the numpy backend or for models given as ordinary Python
callables.  Lattice sweeps have a separate vectorized numpy implementation.
``select`` picks the right variant for a given set of model callables.
"""
from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np

from ._backend import USE_NUMBA, is_compiled, njit

# open loop / jump adapted / feedback
MODE_OPEN_LOOP = 0
MODE_JUMP_ADAPTED = 1
MODE_FEEDBACK = 2


def select(name: str, *callables):
    """Kernel ``name``, compiled if every callable can be called from nopython code."""
    if USE_NUMBA and all(is_compiled(c) for c in callables):
        return getattr(COMPILED, name)
    return getattr(PYTHON, name)


@njit(cache=True)
def null_feedback(counts, N, fb_theta):
    return np.zeros((1, 1))


def _build(jit):
    """All model-calling kernels, decorated with ``jit``."""

    # --------------------------------------------------------------------------
    # event-driven simulation


    @jit
    def sim_chunk(
        rate_fn, theta, fb_fn, fb_theta, mode,
        counts, clock, held,
        breaks, weights, switches, horizon,
        u, out_t, out_counts, out_w, out_from, out_to,
    ):
        """Advance the measure-valued process until done, out of randomness or out of space.

        ``clock`` = [t, uniforms consumed from ``u``, pending move i, pending move j]; ``counts`` and ``held``
        are updated in place.  Each written record is one constant segment: its
        start time, the occupation counts, the applied profile and the move that
        ended the previous segment (-1, -1 for a control breakpoint).
        Returns (records written, finished flag).
        """
        S = counts.shape[0]
        N = counts.sum()
        t = clock[0]
        pos = int(clock[1])
        n_out = out_t.shape[0]
        n = 0
        last_from = int(clock[2])
        last_to = int(clock[3])
        K = breaks.shape[0]
        while True:
            if t >= horizon:
                clock[0] = t
                clock[1] = pos
                return n, True
            if n >= n_out or pos + 2 > u.shape[0]:
                clock[0] = t
                clock[1] = pos
                clock[2] = last_from
                clock[3] = last_to
                return n, False
            mu = counts / N
            # control in force on [t, next_change)
            if mode == MODE_FEEDBACK:
                W = fb_fn(counts, N, fb_theta)
                next_change = horizon
            else:
                seg = np.searchsorted(breaks, t, side="right") - 1
                if mode == MODE_OPEN_LOOP:
                    W = weights[seg]
                    next_change = breaks[seg + 1] if seg + 1 < K else horizon
                else:
                    W = held
                    k = np.searchsorted(switches, t, side="right")
                    next_change = switches[k] if k < switches.shape[0] else horizon
            if next_change > horizon:
                next_change = horizon
            Q = rate_fn(mu, theta)
            A = W.shape[1]
            rates = np.zeros((S, S))
            total = 0.0
            for i in range(S):
                if counts[i] == 0:
                    continue
                for j in range(S):
                    if j == i:
                        continue
                    s = 0.0
                    for a in range(A):
                        s += W[i, a] * Q[i, a, j]
                    r = counts[i] * s
                    if r > 0.0:
                        rates[i, j] = r
                        total += r
            out_t[n] = t
            out_counts[n, :] = counts
            out_w[n, :, :] = W
            out_from[n] = last_from
            out_to[n] = last_to
            n += 1
            if total <= 0.0:
                t_new = next_change
                jumped = False
            else:
                tau = -math.log1p(-u[pos]) / total
                pos += 1
                if t + tau >= next_change:
                    t_new = next_change
                    jumped = False
                else:
                    t_new = t + tau
                    jumped = True
            if not jumped:
                t = t_new
                last_from = -1
                last_to = -1
                if mode == MODE_JUMP_ADAPTED and t < horizon:
                    seg = np.searchsorted(breaks, t, side="right") - 1
                    held[:, :] = weights[seg]
                continue
            target = u[pos] * total
            pos += 1
            acc = 0.0
            fi = -1
            fj = -1
            for i in range(S):
                for j in range(S):
                    if rates[i, j] > 0.0:
                        acc += rates[i, j]
                        fi = i
                        fj = j
                        if acc > target:
                            break
                if acc > target:
                    break
            counts[fi] -= 1
            counts[fj] += 1
            t = t_new
            last_from = fi
            last_to = fj
            if mode == MODE_JUMP_ADAPTED:
                seg = np.searchsorted(breaks, t, side="right") - 1
                held[:, :] = weights[seg]


    @jit
    def segment_rewards(reward_fn, theta, counts, N, weights):
        """r(mu_k, alpha_k) = sum_i mu_k(i) sum_a alpha_k(i, a) r(i, a, mu_k) per record."""
        K = counts.shape[0]
        S = counts.shape[1]
        out = np.zeros(K)
        for k in range(K):
            mu = counts[k] / N
            R = reward_fn(mu, theta)
            s = 0.0
            for i in range(S):
                if counts[k, i] == 0:
                    continue
                for a in range(weights.shape[2]):
                    s += mu[i] * weights[k, i, a] * R[i, a]
            out[k] = s
        return out


    @jit
    def segment_drifts(rate_fn, theta, counts, N, weights):
        """Mean-field drift f(mu_k, alpha_k) for every record."""
        K = counts.shape[0]
        out = np.zeros((K, counts.shape[1]))
        for k in range(K):
            out[k] = _drift(rate_fn, theta, counts[k] / N, weights[k])
        return out


    @jit
    def terminal_values(terminal_fn, theta, counts, N):
        out = np.zeros(counts.shape[0])
        for k in range(counts.shape[0]):
            out[k] = terminal_fn(counts[k] / N, theta)
        return out


    # --------------------------------------------------------------------------
    # mean-field ODE


    @jit
    def _drift_into(rate_fn, theta, mu, W, out):
        Q = rate_fn(mu, theta)
        S = mu.shape[0]
        for j in range(S):
            out[j] = 0.0
        for i in range(S):
            if mu[i] == 0.0:
                continue
            for a in range(W.shape[1]):
                w = W[i, a]
                if w == 0.0:
                    continue
                c = mu[i] * w
                for j in range(S):
                    out[j] += c * Q[i, a, j]


    @jit
    def _drift(rate_fn, theta, mu, W):
        f = np.zeros(mu.shape[0])
        _drift_into(rate_fn, theta, mu, W, f)
        return f


    @jit
    def _reward_rate(reward_fn, theta, mu, W):
        R = reward_fn(mu, theta)
        s = 0.0
        for i in range(mu.shape[0]):
            for a in range(W.shape[1]):
                s += mu[i] * W[i, a] * R[i, a]
        return s


    @jit
    def limit_drift(rate_fn, theta, mu, W):
        return _drift(rate_fn, theta, mu, W)


    @jit
    def _rk4_step(rate_fn, reward_fn, theta, mu, W, t, h, beta, k1, k2, k3, k4, tmp):
        """One RK4 step of (mu, J) in place; returns the reward increment."""
        S = mu.shape[0]
        _drift_into(rate_fn, theta, mu, W, k1)
        r1 = _reward_rate(reward_fn, theta, mu, W)
        for j in range(S):
            tmp[j] = mu[j] + 0.5 * h * k1[j]
        _drift_into(rate_fn, theta, tmp, W, k2)
        r2 = _reward_rate(reward_fn, theta, tmp, W)
        for j in range(S):
            tmp[j] = mu[j] + 0.5 * h * k2[j]
        _drift_into(rate_fn, theta, tmp, W, k3)
        r3 = _reward_rate(reward_fn, theta, tmp, W)
        for j in range(S):
            tmp[j] = mu[j] + h * k3[j]
        _drift_into(rate_fn, theta, tmp, W, k4)
        r4 = _reward_rate(reward_fn, theta, tmp, W)
        for j in range(S):
            mu[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        if beta == 0.0:
            return h / 6.0 * (r1 + 2.0 * r2 + 2.0 * r3 + r4)
        e0 = math.exp(-beta * t)
        em = math.exp(-beta * (t + 0.5 * h))
        e1 = math.exp(-beta * (t + h))
        return h / 6.0 * (e0 * r1 + 2.0 * em * (r2 + r3) + e1 * r4)


    @jit
    def _project(mu):
        """Clip negatives and renormalize in place; returns the projection magnitude."""
        neg = 0.0
        tot = 0.0
        for i in range(mu.shape[0]):
            if mu[i] < 0.0:
                neg -= mu[i]
                mu[i] = 0.0
            tot += mu[i]
        for i in range(mu.shape[0]):
            mu[i] /= tot
        return neg + abs(tot - 1.0)


    @jit
    def ode_rk4(rate_fn, reward_fn, theta, mu0, grid, step_w, beta, clip_tol):
        """RK4 for the mean-field ODE with the running discounted reward as an extra component.

        ``step_w[k]`` is the profile held on [grid[k], grid[k+1]).  The reward
        component makes the quadrature Simpson's rule within each step.
        Returns (trajectory, accumulated reward at each node, max projection, status)
        where status = -1 on success or the step index at which the projection
        exceeded ``clip_tol``.
        """
        n = grid.shape[0] - 1
        S = mu0.shape[0]
        traj = np.zeros((n + 1, S))
        acc = np.zeros(n + 1)
        traj[0] = mu0
        mu = mu0.copy()
        k1 = np.zeros(S)
        k2 = np.zeros(S)
        k3 = np.zeros(S)
        k4 = np.zeros(S)
        tmp = np.zeros(S)
        J = 0.0
        worst = 0.0
        for k in range(n):
            t = grid[k]
            J += _rk4_step(rate_fn, reward_fn, theta, mu, step_w[k], t, grid[k + 1] - t, beta, k1, k2, k3, k4, tmp)
            proj = _project(mu)
            if proj > worst:
                worst = proj
            traj[k + 1] = mu
            acc[k + 1] = J
            if proj > clip_tol:
                return traj, acc, worst, k
        return traj, acc, worst, -1


    @jit
    def ode_rk4_feedback(rate_fn, reward_fn, theta, fb_fn, fb_theta, mu0, grid, beta):
        """Like ``ode_rk4`` with the profile recomputed from the state at each step start.

        Returns (trajectory, accumulated reward, profiles used per step).
        """
        n = grid.shape[0] - 1
        S = mu0.shape[0]
        traj = np.zeros((n + 1, S))
        acc = np.zeros(n + 1)
        traj[0] = mu0
        mu = mu0.copy()
        W0 = fb_fn(mu, fb_theta)
        used = np.zeros((n, W0.shape[0], W0.shape[1]))
        k1 = np.zeros(S)
        k2 = np.zeros(S)
        k3 = np.zeros(S)
        k4 = np.zeros(S)
        tmp = np.zeros(S)
        J = 0.0
        for k in range(n):
            t = grid[k]
            W = fb_fn(mu, fb_theta)
            used[k] = W
            J += _rk4_step(rate_fn, reward_fn, theta, mu, W, t, grid[k + 1] - t, beta, k1, k2, k3, k4, tmp)
            _project(mu)
            traj[k + 1] = mu
            acc[k + 1] = J
        return traj, acc, used


    # --------------------------------------------------------------------------
    # lattice tensors and Bellman-type sweeps


    @jit
    def lattice_tensors(rate_fn, reward_fn, theta, counts, N, S, A):
        P = counts.shape[0]
        Qs = np.zeros((P, S, A, S))
        Rs = np.zeros((P, S, A))
        for p in range(P):
            mu = counts[p] / N
            Qs[p] = rate_fn(mu, theta)
            Rs[p] = reward_fn(mu, theta)
        return Qs, Rs

    return SimpleNamespace(
        sim_chunk=sim_chunk,
        segment_rewards=segment_rewards,
        segment_drifts=segment_drifts,
        terminal_values=terminal_values,
        _drift_into=_drift_into,
        _drift=_drift,
        _reward_rate=_reward_rate,
        limit_drift=limit_drift,
        _rk4_step=_rk4_step,
        _project=_project,
        ode_rk4=ode_rk4,
        ode_rk4_feedback=ode_rk4_feedback,
        lattice_tensors=lattice_tensors,
    )


COMPILED = _build(njit)
PYTHON = _build(lambda f: f)


# --------------------------------------------------------------------------
# lattice sweeps


@njit(cache=True)
def _gains_nb(Qs, Rs, counts, N, succ, v):
    """D[p, i, a] = mu(i) r(i,a,mu) + n_i sum_j q(j|i,a,mu) (v(mu^{i->j}) - v(mu))."""
    P, S, A = Rs.shape
    D = np.zeros((P, S, A))
    for p in range(P):
        vp = v[p]
        for i in range(S):
            ni = counts[p, i]
            mi = ni / N
            for a in range(A):
                s = 0.0
                if ni > 0:
                    for j in range(S):
                        if j != i:
                            s += Qs[p, i, a, j] * (v[succ[p, i, j]] - vp)
                D[p, i, a] = mi * Rs[p, i, a] + ni * s
    return D


def _gains_np(Qs, Rs, counts, N, succ, v):
    dv = v[succ] - v[:, None, None]  # (P, S, S); succ[p,i,i] = p so the diagonal is 0
    flow = np.einsum("pias,pis->pia", Qs, dv)
    n = counts.astype(float)
    return (n / N)[:, :, None] * Rs + n[:, :, None] * flow


@njit(cache=True)
def _max_gain_nb(Qs, Rs, counts, N, succ, mask, v):
    D = _gains_nb(Qs, Rs, counts, N, succ, v)
    P, S, A = D.shape
    total = np.zeros(P)
    arg = np.zeros((P, S), dtype=np.int64)
    for p in range(P):
        s = 0.0
        for i in range(S):
            best = -np.inf
            k = 0
            for a in range(A):
                # strict comparison keeps the lowest index among ties
                if mask[i, a] and D[p, i, a] > best:
                    best = D[p, i, a]
                    k = a
            s += best
            arg[p, i] = k
        total[p] = s
    return total, arg


def _max_gain_np(Qs, Rs, counts, N, succ, mask, v):
    D = _gains_np(Qs, Rs, counts, N, succ, v)
    D = np.where(mask[None], D, -np.inf)
    arg = np.argmax(D, axis=2)
    return np.take_along_axis(D, arg[:, :, None], axis=2)[:, :, 0].sum(axis=1), arg


@njit(cache=True)
def _policy_gain_nb(Qs, Rs, counts, N, succ, Wp, v):
    D = _gains_nb(Qs, Rs, counts, N, succ, v)
    P, S, A = D.shape
    out = np.zeros(P)
    for p in range(P):
        s = 0.0
        for i in range(S):
            for a in range(A):
                s += Wp[p, i, a] * D[p, i, a]
        out[p] = s
    return out


def _policy_gain_np(Qs, Rs, counts, N, succ, Wp, v):
    return np.einsum("pia,pia->p", Wp, _gains_np(Qs, Rs, counts, N, succ, v))


if USE_NUMBA:
    max_gain = _max_gain_nb
    policy_gain = _policy_gain_nb
else:
    max_gain = _max_gain_np
    policy_gain = _policy_gain_np

# both variants stay importable for equivalence tests and the benchmark
MAX_GAIN_VARIANTS = {"numba": _max_gain_nb, "numpy": _max_gain_np}
POLICY_GAIN_VARIANTS = {"numba": _policy_gain_nb, "numpy": _policy_gain_np}


def bellman_sweep(Qs, Rs, counts, N, succ, mask, v, beta, lam):
    """One application of the uniformized Bellman operator."""
    total, arg = max_gain(Qs, Rs, counts, N, succ, mask, v)
    return (total + lam * v) / (beta + lam), arg
