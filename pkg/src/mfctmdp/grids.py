"""Time grids that contain every control breakpoint as a node."""
from __future__ import annotations

import math

import numpy as np

from .errors import InvalidParameter


def make_time_grid(horizon: float, n_steps: int | None = None, step: float | None = None, breakpoints=()) -> np.ndarray:
    """Piecewise-uniform grid on [0, horizon].

    Each interval between consecutive breakpoints is split into equal steps
    no longer than ``step`` (default ``horizon / n_steps``), so discontinuities
    of a piecewise-constant control always sit on nodes.
    """
    if not (horizon > 0) or math.isinf(horizon):
        raise InvalidParameter("time grid needs a finite positive horizon")
    if step is None:
        if n_steps is None or n_steps < 1:
            raise InvalidParameter("give n_steps >= 1 or step > 0")
        step = horizon / n_steps
    if step <= 0:
        raise InvalidParameter("step must be positive")
    cuts = sorted({0.0, float(horizon), *(float(b) for b in breakpoints if 0.0 < b < horizon)})
    pieces = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        # tolerate float noise so that T / n_steps gives exactly n_steps steps
        m = max(1, math.ceil((b - a) / step - 1e-9))
        pieces.append(np.linspace(a, b, m + 1)[:-1])
    pieces.append(np.array([float(horizon)]))
    return np.concatenate(pieces)


def check_grid(grid, horizon: float | None = None, breakpoints=()) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size < 2 or g[0] != 0.0 or np.any(np.diff(g) <= 0):
        raise InvalidParameter("time grid must start at 0 and increase strictly")
    if horizon is not None and not math.isclose(g[-1], horizon, rel_tol=0, abs_tol=1e-12):
        raise InvalidParameter(f"time grid ends at {g[-1]}, horizon is {horizon}")
    for b in breakpoints:
        if 0.0 < b < g[-1]:
            k = np.searchsorted(g, b)
            if not math.isclose(g[k], b, rel_tol=0, abs_tol=1e-12):
                raise InvalidParameter(f"control breakpoint {b} is not a grid node")
    return g


def step_profiles(path, grid: np.ndarray) -> np.ndarray:
    """Profile in force on each step [grid[k], grid[k+1]), read at the step midpoint."""
    mids = 0.5 * (grid[:-1] + grid[1:])
    idx = np.clip(np.searchsorted(path.breakpoints, mids, side="right") - 1, 0, None)
    return np.ascontiguousarray(path.weights[idx])
