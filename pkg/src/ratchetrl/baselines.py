"""Handcrafted switching policies: periodic, greedy, threshold, and
maximal-net-displacement (MND), plus grid search for their free parameters.

Scalar decision rules live next to batched adapter classes that plug into the
evaluation loop (one adapter instance drives a whole trajectory ensemble).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .ratchet import RatchetParams, SystemState, critical_points, force

DEFAULT_T_ON = 0.03
DEFAULT_T_OFF = 0.04


def periodic_policy(t: float, t_on: float = DEFAULT_T_ON, t_off: float = DEFAULT_T_OFF) -> int:
    """On during the first t_on of every (t_on + t_off) cycle."""
    if t < 0:
        raise ValueError("time must be non-negative")
    if t_on <= 0 or t_off <= 0:
        raise ValueError("periods must be positive")
    return 1 if (t % (t_on + t_off)) < t_on else 0


def _positions(state):
    return state.x if isinstance(state, SystemState) else np.asarray(state, dtype=np.float64)


def mean_force(state, params: RatchetParams) -> float:
    """Mean of the potential force over the particles."""
    return float(np.mean(force(params, _positions(state))))


def greedy_policy(state, params: RatchetParams) -> int:
    """On exactly when the mean force is strictly positive."""
    return 1 if mean_force(state, params) > 0 else 0


@dataclass(frozen=True)
class ThresholdState:
    """Hysteresis bookkeeping: trigger levels plus the previous force and action."""

    u_on: float = 0.0
    u_off: float = 0.0
    prev_f: float = 0.0
    prev_alpha: int = 1

    def __post_init__(self):
        if self.u_on < 0 or self.u_off > 0:
            raise ValueError("need u_on >= 0 and u_off <= 0")


def threshold_policy(ts: ThresholdState, f_now: float):
    """Switch off when the mean force falls through u_on, on when it rises
    through u_off; otherwise hold the previous action. Returns (alpha, new state)."""
    if f_now < ts.prev_f and f_now <= ts.u_on:
        alpha = 0
    elif f_now > ts.prev_f and f_now >= ts.u_off:
        alpha = 1
    else:
        alpha = ts.prev_alpha
    return alpha, replace(ts, prev_f=f_now, prev_alpha=alpha)


@dataclass(frozen=True)
class MndParams:
    """Offset and potential extrema for the displacement-to-minimum rule."""

    x0: float
    x_max: float
    x_min: float

    @classmethod
    def for_potential(cls, params: RatchetParams, x0: float = 0.0):
        x_max, x_min = critical_points(params)
        return cls(x0=x0, x_max=x_max, x_min=x_min)


def displacement_to_minimum(x, mp: MndParams, L: float):
    """d(x) = x_min + x0 - x on the window (x_max, x_max + L], extended periodically.

    The minimum is taken as its representative inside that window, so the rule
    also works when x_min < x_max in [0, L) (the sawtooth case).
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.mod(x - mp.x_max, L)
    r = np.where(r == 0.0, L, r)
    x_min_eff = mp.x_max + np.mod(mp.x_min - mp.x_max, L)
    if x_min_eff == mp.x_max:
        x_min_eff = mp.x_max + L
    d = x_min_eff + mp.x0 - (mp.x_max + r)
    return d if d.ndim else float(d)


def mnd_policy(state_delayed, mp: MndParams, params: RatchetParams) -> int:
    """On when the summed displacement-to-minimum of the (delayed) positions is positive."""
    d = displacement_to_minimum(_positions(state_delayed), mp, params.L)
    return 1 if float(np.sum(d)) > 0 else 0


class PeriodicSwitching:
    """Time-based adapter; every trajectory gets the same action."""

    name = "periodic"

    def __init__(self, t_on: float = DEFAULT_T_ON, t_off: float = DEFAULT_T_OFF):
        if t_on <= 0 or t_off <= 0:
            raise ValueError("periods must be positive")
        self.t_on = t_on
        self.t_off = t_off

    def reset(self, m):
        pass

    def actions(self, t, x, history):
        a = periodic_policy(t, self.t_on, self.t_off)
        return np.full(x.shape[0], a, dtype=np.int64)


class Greedy:
    name = "greedy"

    def __init__(self, params: RatchetParams):
        self.params = params

    def reset(self, m):
        pass

    def actions(self, t, x, history):
        f = np.mean(force(self.params, x), axis=1)
        return (f > 0).astype(np.int64)


class Threshold:
    """Hysteretic force-threshold adapter; state is tracked per trajectory."""

    name = "threshold"

    def __init__(self, params: RatchetParams, u_on: float = 0.0, u_off: float = 0.0):
        if u_on < 0 or u_off > 0:
            raise ValueError("need u_on >= 0 and u_off <= 0")
        self.params = params
        self.u_on = u_on
        self.u_off = u_off
        self._prev_f = None
        self._prev_alpha = None

    def reset(self, m):
        self._prev_f = None
        self._prev_alpha = np.ones(m, dtype=np.int64)

    def actions(self, t, x, history):
        f = np.mean(force(self.params, x), axis=1)
        if self._prev_f is None:
            # first observation: nothing is rising or falling yet, hold alpha=1
            self._prev_f = f
            return self._prev_alpha.copy()
        alpha = self._prev_alpha.copy()
        alpha[(f < self._prev_f) & (f <= self.u_on)] = 0
        alpha[(f > self._prev_f) & (f >= self.u_off)] = 1
        self._prev_f = f
        self._prev_alpha = alpha
        return alpha.copy()


class Mnd:
    name = "mnd"

    def __init__(self, params: RatchetParams, mp: MndParams):
        self.params = params
        self.mp = mp

    def reset(self, m):
        pass

    def actions(self, t, x, history):
        d = displacement_to_minimum(x, self.mp, self.params.L)
        return (np.sum(d, axis=1) > 0).astype(np.int64)


class AlwaysOff:
    name = "off"

    def reset(self, m):
        pass

    def actions(self, t, x, history):
        return np.zeros(x.shape[0], dtype=np.int64)


class AlwaysOn:
    name = "on"

    def reset(self, m):
        pass

    def actions(self, t, x, history):
        return np.ones(x.shape[0], dtype=np.int64)


def optimize_mnd_x0(n, tau, params, grid, eval_budget) -> float:
    """Pick the offset from the grid with the highest evaluated current.

    Exact ties go to the smaller |x0|. eval_budget carries (duration, ensemble,
    seed) for the underlying evaluation runs.
    """
    from .evaluation import evaluate

    grid = list(grid)
    if not grid:
        raise ValueError("x0 grid must not be empty")
    best_x0, best_current = None, -np.inf
    for x0 in grid:
        mp = MndParams.for_potential(params, x0=x0)
        report = evaluate(Mnd(params, mp), n=n, tau=tau, params=params,
                          duration=eval_budget.duration, ensemble=eval_budget.ensemble,
                          seed=eval_budget.seed)
        c = report.current_mean
        if c > best_current or (c == best_current and abs(x0) < abs(best_x0)):
            best_x0, best_current = x0, c
    return best_x0


def optimize_threshold(n, params, u_on_grid, u_off_grid, eval_budget, tau=0.0):
    """Grid search the (u_on, u_off) pair with the highest evaluated current."""
    from .evaluation import evaluate

    best, best_current = None, -np.inf
    for u_on in u_on_grid:
        for u_off in u_off_grid:
            report = evaluate(Threshold(params, u_on=u_on, u_off=u_off), n=n, tau=tau,
                              params=params, duration=eval_budget.duration,
                              ensemble=eval_budget.ensemble, seed=eval_budget.seed)
            if report.current_mean > best_current:
                best, best_current = (u_on, u_off), report.current_mean
    return best
