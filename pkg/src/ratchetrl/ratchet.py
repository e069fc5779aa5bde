"""Overdamped Langevin dynamics of N Brownian particles in a switchable ratchet potential.

Positions are kept unwrapped so that the summed per-step rewards telescope to the
total mean displacement; wrapping into one spatial period happens only where a
periodic quantity is computed (features, sawtooth branches, displacement-to-minimum).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

SMOOTH = "smooth"
SAWTOOTH = "sawtooth"


@dataclass(frozen=True)
class RatchetParams:
    """Physical constants of the ratchet model (units: length L, energy kT, time L^2/D)."""

    L: float = 1.0
    U0: float = 5.0
    kT: float = 1.0
    D: float = 1.0
    dt: float = 1e-3
    potential_kind: str = SMOOTH

    def __post_init__(self):
        for name in ("L", "U0", "kT", "D", "dt"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")
        if self.potential_kind not in (SMOOTH, SAWTOOTH):
            raise ValueError(f"unknown potential_kind {self.potential_kind!r}")

    @property
    def eta(self) -> float:
        """Friction coefficient, kT / D."""
        return self.kT / self.D


@dataclass
class SystemState:
    """Unwrapped particle positions and elapsed time."""

    x: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 1 or self.x.size < 1:
            raise ValueError("state needs a 1-D position vector with N >= 1")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("positions must be finite")

    @property
    def N(self) -> int:
        return self.x.size


def potential(params: RatchetParams, x):
    """Potential energy U(x); accepts scalars or arrays, periodic with period L."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite position passed to potential")
    L, U0 = params.L, params.U0
    if params.potential_kind == SMOOTH:
        u = U0 * (np.sin(2 * np.pi * x / L) + 0.25 * np.sin(4 * np.pi * x / L))
    else:
        y = x - L * np.floor(x / L)
        u = np.where(y <= L / 3, 3 * U0 * y / L, U0 - 1.5 * U0 * (y - L / 3) / L)
    return u if u.ndim else float(u)


def force(params: RatchetParams, x):
    """Force F(x) = -dU/dx; at sawtooth kinks the left-branch value is used."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite position passed to force")
    L, U0 = params.L, params.U0
    if params.potential_kind == SMOOTH:
        f = -U0 * (
            2 * np.pi / L * np.cos(2 * np.pi * x / L)
            + np.pi / L * np.cos(4 * np.pi * x / L)
        )
    else:
        y = x - L * np.floor(x / L)
        # left limit at the kinks: y=0 belongs to the downhill branch, y=L/3 to the steep one
        f = np.where((y > 0) & (y <= L / 3), -3 * U0 / L, 1.5 * U0 / L)
    return f if f.ndim else float(f)


def critical_points(params: RatchetParams) -> tuple[float, float]:
    """(x_max, x_min) of the potential in [0, L), to 1e-10.

    The sawtooth extrema sit at the kinks; the smooth ones are found by scanning
    the force for sign changes and bisecting each bracket.
    """
    L = params.L
    if params.potential_kind == SAWTOOTH:
        return L / 3, 0.0
    grid = np.linspace(0.0, L, 4097)
    f = force(params, grid)
    roots = []
    for i in range(len(grid) - 1):
        if f[i] == 0.0:
            roots.append(grid[i])
        elif f[i] * f[i + 1] < 0:
            lo, hi = grid[i], grid[i + 1]
            flo = f[i]
            while hi - lo > 1e-12:
                mid = 0.5 * (lo + hi)
                fm = force(params, mid)
                if fm == 0.0:
                    lo = hi = mid
                elif (fm > 0) == (flo > 0):
                    lo, flo = mid, fm
                else:
                    hi = mid
            roots.append(0.5 * (lo + hi))
    roots = [r % L for r in roots]
    if not roots:
        raise RuntimeError("no critical points found")
    x_max = max(roots, key=lambda r: potential(params, r))
    x_min = min(roots, key=lambda r: potential(params, r))
    return x_max, x_min


def featurize(x, params: RatchetParams) -> np.ndarray:
    """Map positions to the unit-circle features (cos(2*pi*x/L), sin(2*pi*x/L)).

    Works on a SystemState, an (N,) vector or any (..., N) batch; returns an
    array with a trailing axis of size 2. Invariant under shifts by whole periods.
    """
    if isinstance(x, SystemState):
        x = x.x
    x = np.asarray(x, dtype=np.float64)
    ang = 2 * np.pi * x / params.L
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def step(state: SystemState, alpha: int, params: RatchetParams, rng: np.random.Generator):
    """One Euler-Maruyama step; returns (new state, mean displacement reward).

    x' = x + (dt/eta) * alpha * F(x) + sqrt(2 D dt) * g with g ~ N(0, 1) i.i.d.
    """
    if alpha not in (0, 1):
        raise ValueError(f"alpha must be 0 or 1, got {alpha!r}")
    x = state.x
    g = rng.standard_normal(x.size)
    drift = (params.dt / params.eta) * force(params, x) if alpha else 0.0
    x_new = x + drift + math.sqrt(2 * params.D * params.dt) * g
    if not np.all(np.isfinite(x_new)):
        raise FloatingPointError("integration diverged to non-finite positions")
    reward = float(np.mean(x_new - x))
    return SystemState(x_new, state.t + params.dt), reward


def delay_steps(tau: float, dt: float) -> int:
    """Queue depth d = tau/dt; tau must be a whole number of steps within 1e-9."""
    d = tau / dt
    d_round = round(d)
    if abs(d - d_round) > 1e-9:
        raise ValueError(f"tau={tau} is not an integer multiple of dt={dt}")
    if d_round < 0:
        raise ValueError("tau must be >= 0")
    return d_round


@dataclass
class DelayedEnv:
    """Single-trajectory environment applying each action tau after it was chosen.

    The FIFO queue holds the d actions already chosen but not yet applied, oldest
    first; that snapshot is exactly the on-off history the policy may condition on.
    The queue starts all zeros: the system begins uncontrolled.
    """

    state: SystemState
    params: RatchetParams
    tau: float = 0.0
    queue: deque = field(init=False)

    def __post_init__(self):
        self.d = delay_steps(self.tau, self.params.dt)
        self.queue = deque([0] * self.d, maxlen=self.d if self.d else None)

    def history(self) -> np.ndarray:
        """Pending actions, oldest first (length d)."""
        return np.fromiter(self.queue, dtype=np.int64, count=self.d)

    def step(self, new_alpha: int, rng: np.random.Generator):
        """Apply the oldest queued action, enqueue new_alpha; returns (state, reward)."""
        if self.d == 0:
            applied = new_alpha
        else:
            applied = self.queue.popleft()
            self.queue.append(new_alpha)
        self.state, reward = step(self.state, applied, self.params, rng)
        return self.state, reward


def delayed_step(env: DelayedEnv, new_alpha: int, rng: np.random.Generator):
    """Functional alias for DelayedEnv.step."""
    return env.step(new_alpha, rng)


class BatchedEnv:
    """M independent delayed trajectories stepped in lockstep.

    Each trajectory owns its own random stream, so the realized paths are
    bit-identical to stepping the trajectories one at a time, regardless of how
    the batch is chunked or scheduled.
    """

    def __init__(self, params: RatchetParams, n: int, tau: float,
                 seed_seqs, init_uniform: bool = True):
        if n < 1:
            raise ValueError("need at least one particle")
        self.params = params
        self.n = n
        self.d = delay_steps(tau, params.dt)
        self.tau = tau
        self.rngs = [np.random.Generator(np.random.PCG64(ss)) for ss in seed_seqs]
        self.m = len(self.rngs)
        if init_uniform:
            self.x = np.stack([rng.random(n) * params.L for rng in self.rngs])
        else:
            self.x = np.zeros((self.m, n))
        self.t = 0.0
        self.queue = np.zeros((self.m, self.d), dtype=np.int64)
        self._noise_scale = math.sqrt(2 * params.D * params.dt)

    def history(self) -> np.ndarray:
        """(M, d) pending actions, oldest in column 0."""
        return self.queue

    def step(self, alphas: np.ndarray) -> np.ndarray:
        """Advance every trajectory one step; alphas are the newly chosen actions.

        Returns the (M,) mean-displacement rewards produced by the actions that
        were actually applied this step (the delayed ones when d > 0).
        """
        alphas = np.asarray(alphas, dtype=np.int64)
        if self.d:
            applied = self.queue[:, 0].copy()
            self.queue[:, :-1] = self.queue[:, 1:]
            self.queue[:, -1] = alphas
        else:
            applied = alphas
        g = np.empty_like(self.x)
        for i, rng in enumerate(self.rngs):
            g[i] = rng.standard_normal(self.n)
        # same evaluation order as the single-trajectory step: (x + drift) + noise
        drift = np.zeros_like(self.x)
        if applied.any():
            on = applied.astype(bool)
            drift[on] = (self.params.dt / self.params.eta) * force(self.params, self.x[on])
        x_new = self.x + drift + self._noise_scale * g
        if not np.all(np.isfinite(x_new)):
            raise FloatingPointError("integration diverged to non-finite positions")
        rewards = np.mean(x_new - self.x, axis=1)
        self.x = x_new
        self.t += self.params.dt
        return rewards
