"""Deterministic policy evaluation: ensemble current estimates, parameter sweeps,
multi-run selection, decision-boundary grids, and single-rollout time traces.

Trajectory ensembles are simulated in fixed-size chunks so that results are
bit-identical no matter how many worker threads execute the chunks.
"""

from __future__ import annotations

import copy
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .networks import Agent, NetworkPolicy, load_checkpoint
from .ratchet import BatchedEnv, RatchetParams, featurize

_CHUNK = 16


@dataclass(frozen=True)
class EvalReport:
    policy: str
    n: int
    tau: float
    current_mean: float
    current_std: float
    ensemble: int
    duration: float
    seed: int


@dataclass(frozen=True)
class EvalBudget:
    """How much simulation a parameter search may spend per candidate."""

    duration: float = 50.0
    ensemble: int = 8
    seed: int = 0


def _steps(duration, dt):
    s = round(duration / dt)
    if s < 1:
        raise ValueError(f"duration {duration} shorter than one step dt={dt}")
    return s


def _run_chunk(policy, params, n, tau, member_seeds, n_steps, burn_steps):
    """Simulate one chunk of trajectories; returns per-member mean displacement."""
    worker = copy.deepcopy(policy)
    env = BatchedEnv(params, n, tau, member_seeds)
    worker.reset(env.m)
    for _ in range(burn_steps):
        env.step(worker.actions(env.t, env.x, env.history()))
    x_start = env.x.copy()
    for _ in range(n_steps):
        env.step(worker.actions(env.t, env.x, env.history()))
    return np.mean(env.x - x_start, axis=1)


def evaluate(policy, n, tau, params: RatchetParams, duration=50.0, ensemble=32,
             seed=0, burn_in=0.0, threads=1, name=None, seed_seq=None) -> EvalReport:
    """Estimate the steady-state current of a policy over a trajectory ensemble.

    Each ensemble member runs `duration` time units (after an optional burn-in)
    and contributes one current sample: its mean displacement divided by the
    duration. The report carries the across-member mean and sample std.
    """
    if ensemble < 2:
        raise ValueError("need an ensemble of at least 2 for a spread estimate")
    n_steps = _steps(duration, params.dt)
    burn_steps = round(burn_in / params.dt)
    ss = seed_seq if seed_seq is not None else np.random.SeedSequence(seed)
    member_seeds = ss.spawn(ensemble)
    chunks = [member_seeds[i:i + _CHUNK] for i in range(0, ensemble, _CHUNK)]
    run = lambda seeds: _run_chunk(policy, params, n, tau, seeds, n_steps, burn_steps)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    currents = np.concatenate(parts) / duration
    return EvalReport(policy=name or getattr(policy, "name", type(policy).__name__),
                      n=n, tau=tau,
                      current_mean=float(currents.mean()),
                      current_std=float(currents.std(ddof=1)),
                      ensemble=ensemble, duration=duration, seed=seed)


def sweep(make_policy, axis, values, params: RatchetParams, n=1, tau=0.0,
          duration=50.0, ensemble=32, seed=0, threads=1, csv_path=None):
    """Evaluate a policy along a grid of N or tau values.

    make_policy(n, tau) builds a fresh policy per grid point; axis is "n" or
    "tau". Every point derives its own random streams from the master seed, so
    points are individually reproducible.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep grid must not be empty")
    if axis not in ("n", "tau"):
        raise ValueError(f"axis must be 'n' or 'tau', got {axis!r}")
    point_seqs = np.random.SeedSequence(seed).spawn(len(values))
    reports = []
    for v, ss in zip(values, point_seqs):
        pn = int(v) if axis == "n" else n
        pt = float(v) if axis == "tau" else tau
        policy = make_policy(pn, pt)
        reports.append(evaluate(policy, n=pn, tau=pt, params=params, duration=duration,
                                ensemble=ensemble, seed=seed, threads=threads,
                                seed_seq=ss))
    if csv_path is not None:
        write_reports_csv(reports, csv_path)
    return reports


def write_reports_csv(reports, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["policy", "N", "tau", "current", "current_std",
                    "ensemble", "duration", "seed"])
        for r in reports:
            w.writerow([r.policy, r.n, f"{r.tau:.17g}", f"{r.current_mean:.17g}",
                        f"{r.current_std:.17g}", r.ensemble, f"{r.duration:.17g}", r.seed])


@dataclass
class BestOfResult:
    index: int
    path: Path
    agent: Agent
    reports: list


def best_of_seeds(run_dirs, params: RatchetParams, n=None, tau=None,
                  duration=50.0, ensemble=32, seed=0, threads=1) -> BestOfResult:
    """Re-evaluate the checkpoints of several runs under one common seed and
    return the best; exact ties go to the lowest run index."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("no runs to select from")
    candidates = []
    for d in run_dirs:
        ckpt = d / "best.ckpt"
        if not ckpt.exists():
            ckpt = d / "final.ckpt"
        if not ckpt.exists():
            raise FileNotFoundError(f"no checkpoint found in {d}")
        candidates.append(ckpt)
    best = None
    reports = []
    for i, ckpt in enumerate(candidates):
        agent = load_checkpoint(ckpt)
        use_n = n if n is not None else agent.meta["n"]
        use_tau = tau if tau is not None else agent.meta["tau"]
        report = evaluate(NetworkPolicy(agent.policy, params), n=use_n, tau=use_tau,
                          params=params, duration=duration, ensemble=ensemble,
                          seed=seed, threads=threads, name=f"run{i}")
        reports.append(report)
        if best is None or report.current_mean > best[1]:
            best = (i, report.current_mean, ckpt, agent)
    return BestOfResult(index=best[0], path=best[2], agent=best[3], reports=reports)


def _p_on_batch(policy_like, params, x, history):
    """Switch-on probability for a batch of position rows (networks give the
    softmax probability, handcrafted rules give a hard 0/1)."""
    if isinstance(policy_like, Agent):
        psi = featurize(x, params)
        with ag.no_grad():
            logits = policy_like.policy.forward(psi, history).data
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e[:, 0] / e.sum(axis=1)
    policy = copy.deepcopy(policy_like)
    policy.reset(x.shape[0])
    return policy.actions(0.0, x, history).astype(np.float64)


def boundary_grid(policy_like, resolution, params: RatchetParams, n=1, tau=0.0):
    """Switch-on probability on a uniform position grid (N=1 line or N=2 plane).

    Returns (axis values, p_on) where p_on is (resolution,) for N=1 and a
    (resolution, resolution) matrix indexed [i, j] -> (x1_i, x2_j) for N=2.
    """
    if n not in (1, 2):
        raise ValueError("decision boundaries are only defined for N=1 or N=2")
    from .ratchet import delay_steps

    d = delay_steps(tau, params.dt)
    xs = np.linspace(0.0, params.L, resolution, endpoint=False)
    if n == 1:
        x = xs[:, None]
    else:
        g1, g2 = np.meshgrid(xs, xs, indexing="ij")
        x = np.stack([g1.ravel(), g2.ravel()], axis=1)
    history = np.zeros((x.shape[0], d), dtype=np.int64)
    p_on = np.empty(x.shape[0])
    for lo in range(0, x.shape[0], 4096):
        hi = min(lo + 4096, x.shape[0])
        p_on[lo:hi] = _p_on_batch(policy_like, params, x[lo:hi], history[lo:hi])
    return xs, p_on if n == 1 else p_on.reshape(resolution, resolution)


def write_boundary_csv(xs, p_on, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if p_on.ndim == 1:
            w.writerow(["x1", "p_on"])
            for x, p in zip(xs, p_on):
                w.writerow([f"{x:.17g}", f"{p:.17g}"])
        else:
            w.writerow(["x1", "x2", "p_on"])
            for i, x1 in enumerate(xs):
                for j, x2 in enumerate(xs):
                    w.writerow([f"{x1:.17g}", f"{x2:.17g}", f"{p_on[i, j]:.17g}"])


def time_trace(policy_like, n, duration, params: RatchetParams, tau=0.0, seed=0):
    """One deterministic rollout; returns (t, alpha, value) arrays per step.

    Checkpoint-backed agents log their value-network output; handcrafted
    policies have no value estimate and log NaN.
    """
    n_steps = _steps(duration, params.dt)
    if isinstance(policy_like, Agent):
        agent = policy_like
        policy = NetworkPolicy(agent.policy, params)
        value_net = agent.value
    else:
        policy = copy.deepcopy(policy_like)
        value_net = None
    ss = np.random.SeedSequence(seed)
    env = BatchedEnv(params, n, tau, ss.spawn(1))
    policy.reset(1)
    ts = np.empty(n_steps)
    alphas = np.empty(n_steps, dtype=np.int64)
    values = np.full(n_steps, np.nan)
    for k in range(n_steps):
        ts[k] = env.t
        hist = env.history()
        if value_net is not None:
            with ag.no_grad():
                values[k] = float(value_net.forward(featurize(env.x, params), hist).data[0, 0])
        a = policy.actions(env.t, env.x, hist)
        alphas[k] = a[0]
        env.step(a)
    return ts, alphas, values


def write_trace_csv(ts, alphas, values, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "alpha", "value"])
        for t, a, v in zip(ts, alphas, values):
            w.writerow([f"{t:.17g}", int(a), f"{v:.17g}"])
