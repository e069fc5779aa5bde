"""Proximal policy optimization for the ratchet environment.

One epoch = collect M stochastic trajectories of T steps, compute bootstrapped
returns and generalized advantage estimates, run clipped-surrogate gradient
ascent on the policy until the empirical KL divergence from the collection
policy exceeds 1.5x the target, then regress the value network on the returns.
Policy and value networks are separate and each has its own Adam optimizer.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .networks import Agent, ArchConfig, build_network, save_checkpoint
from .nn import Adam
from .ratchet import BatchedEnv, RatchetParams, featurize

# trajectories M and mini-batch size B by particle count
_MB_TABLE = {1: (1024, 4096), 2: (512, 4096), 4: (256, 4096), 8: (128, 4096),
             16: (64, 2048), 32: (32, 1024), 64: (16, 512)}


def default_m_b(n: int):
    """Default (M, B) for a particle count; unlisted N fall to the next listed
    size up, and everything from 128 on shares (8, 256)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n in _MB_TABLE:
        return _MB_TABLE[n]
    if n > 64:
        return (8, 256)
    return _MB_TABLE[min(k for k in _MB_TABLE if k >= n)]


@dataclass
class PpoConfig:
    traj_len: int = 2000
    epochs: int = 400
    gamma: float = 0.999
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    kld_target: float = 0.01
    iters_pi: int = 625
    iters_v: int = 625
    lr_pi: float = 3e-4
    lr_v: float = 1e-3
    trajectories: int | None = None
    batch: int | None = None

    def __post_init__(self):
        if self.traj_len < 1 or self.epochs < 1 or self.iters_pi < 1 or self.iters_v < 1:
            raise ValueError("counts must be positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_eps <= 0 or self.kld_target <= 0:
            raise ValueError("clip_eps and kld_target must be positive")
        if self.lr_pi < 0 or self.lr_v < 0:
            raise ValueError("learning rates must be non-negative")
        for name in ("trajectories", "batch"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1 when given")

    def resolved(self, n: int) -> "PpoConfig":
        m, b = default_m_b(n)
        return replace(self,
                       trajectories=self.trajectories or m,
                       batch=self.batch or b)


@dataclass(frozen=True)
class EnvFactory:
    """Builds the batched simulation environment for a fixed (params, n, tau)."""

    params: RatchetParams
    n: int
    tau: float = 0.0

    def __call__(self, seed_seqs) -> BatchedEnv:
        return BatchedEnv(self.params, self.n, self.tau, seed_seqs)


@dataclass
class Rollout:
    """Batched (state, action, reward) record of one collection phase.

    T actions/rewards/log-probs and T+1 states/values per trajectory; histories
    are present only in the delayed setting.
    """

    features: np.ndarray              # (T+1, M, N, 2)
    histories: np.ndarray | None      # (T+1, M, d) int8
    actions: np.ndarray               # (T, M) int8
    rewards: np.ndarray               # (T, M)
    logps: np.ndarray                 # (T, M)
    values: np.ndarray                # (T+1, M)


def _log_softmax_np(z):
    s = z - z.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _batched_values(value_net, feats, hists, chunk=8192):
    flat = feats.reshape(-1, feats.shape[-2], feats.shape[-1])
    hflat = None if hists is None else hists.reshape(-1, hists.shape[-1])
    out = np.empty(flat.shape[0])
    with ag.no_grad():
        for lo in range(0, flat.shape[0], chunk):
            hi = min(lo + chunk, flat.shape[0])
            h = None if hflat is None else hflat[lo:hi]
            out[lo:hi] = value_net.forward(flat[lo:hi], h).data[:, 0]
    return out.reshape(feats.shape[:2])


def collect(env_factory, policy, value, cfg: PpoConfig, traj_seed_seqs) -> Rollout:
    """Simulate M trajectories under stochastic action sampling.

    Each trajectory owns one random stream consumed in a fixed order (one
    uniform for the action, then the N thermal kicks), so rollouts are
    bit-reproducible for a fixed seed-to-trajectory assignment.
    """
    env = env_factory(traj_seed_seqs)
    t_len, m, n, d = cfg.traj_len, env.m, env.n, env.d
    feats = np.empty((t_len + 1, m, n, 2))
    hists = np.empty((t_len + 1, m, d), dtype=np.int8) if d else None
    actions = np.empty((t_len, m), dtype=np.int8)
    rewards = np.empty((t_len, m))
    logps = np.empty((t_len, m))
    for t in range(t_len):
        psi = featurize(env.x, env.params)
        feats[t] = psi
        hist = env.history() if d else None
        if d:
            hists[t] = hist
        with ag.no_grad():
            logits = policy.forward(psi, hist).data
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError(
                f"non-finite policy logits at step {t} (t={env.t:.4f}); aborting collection")
        logp = _log_softmax_np(logits)
        p_on = np.exp(logp[:, 0])
        us = np.fromiter((rng.random() for rng in env.rngs), dtype=np.float64, count=m)
        a = (us < p_on).astype(np.int8)
        actions[t] = a
        logps[t] = np.where(a == 1, logp[:, 0], logp[:, 1])
        rewards[t] = env.step(a.astype(np.int64))
    feats[t_len] = featurize(env.x, env.params)
    if d:
        hists[t_len] = env.history()
    values = _batched_values(value, feats, hists)
    return Rollout(features=feats, histories=hists, actions=actions,
                   rewards=rewards, logps=logps, values=values)


def estimated_return(rewards, values, cfg: PpoConfig):
    """Discounted reward-to-go bootstrapped with the value of the final state."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    t_len = rewards.shape[0]
    out = np.empty_like(rewards)
    acc = values[-1].copy() if values.ndim > 1 else np.float64(values[-1])
    for t in range(t_len - 1, -1, -1):
        acc = rewards[t] + cfg.gamma * acc
        out[t] = acc
    return out


def td_residuals(rewards, values, cfg: PpoConfig):
    """One-step temporal-difference errors r_t + gamma*V(s_{t+1}) - V(s_t)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError(f"need {rewards.shape[0] + 1} values, got {values.shape[0]}")
    return rewards + cfg.gamma * values[1:] - values[:-1]


def gae(deltas, cfg: PpoConfig):
    """Truncated generalized advantage estimate, backward recursion over deltas."""
    deltas = np.asarray(deltas, dtype=np.float64)
    decay = cfg.gamma * cfg.gae_lambda
    out = np.empty_like(deltas)
    acc = np.zeros_like(deltas[0]) if deltas.ndim > 1 else np.float64(0.0)
    for t in range(deltas.shape[0] - 1, -1, -1):
        acc = deltas[t] + decay * acc
        out[t] = acc
    return out


def g_clip(eps: float, adv):
    """Clipping envelope: (1+eps)*A for A >= 0 else (1-eps)*A."""
    adv = np.asarray(adv, dtype=np.float64)
    out = np.where(adv >= 0, (1 + eps) * adv, (1 - eps) * adv)
    return out if out.ndim else float(out)


def clipped_objective(log_ratio: Tensor, advantages, cfg: PpoConfig) -> Tensor:
    """Mean of min(ratio * A, g(eps, A)); maximize by minimizing the negation."""
    adv = np.asarray(advantages, dtype=np.float64)
    surr = ag.mul(ag.exp(log_ratio), Tensor(adv))
    return ag.mean(ag.minimum(surr, Tensor(g_clip(cfg.clip_eps, adv))))


def kld_estimate(old_logp, new_logp) -> float:
    """Empirical KL from the collection policy to the current one."""
    return float(np.mean(np.asarray(old_logp) - np.asarray(new_logp)))


@dataclass
class _Dataset:
    feats: np.ndarray
    hists: np.ndarray | None
    actions: np.ndarray
    old_logp: np.ndarray
    adv: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return self.feats.shape[0]


def _flatten(rollout: Rollout, adv, returns) -> _Dataset:
    t_len, m = rollout.actions.shape
    feats = rollout.features[:t_len].reshape(t_len * m, *rollout.features.shape[2:])
    hists = None
    if rollout.histories is not None:
        hists = rollout.histories[:t_len].reshape(t_len * m, -1)
    return _Dataset(feats=feats, hists=hists,
                    actions=rollout.actions.reshape(-1),
                    old_logp=rollout.logps.reshape(-1),
                    adv=adv.reshape(-1), returns=returns.reshape(-1))


def _chosen_logp(policy, feats, hists, actions) -> Tensor:
    """Log-probability of the recorded actions under the current policy (graph-building)."""
    logits = policy.forward(feats, hists)
    logp = ag.log_softmax(logits, axis=1)
    onehot = np.zeros(logits.data.shape)
    onehot[np.arange(actions.size), 1 - actions.astype(np.int64)] = 1.0
    return ag.sum(ag.mul(logp, Tensor(onehot)), axis=1)


def _chosen_logp_np(policy, data: _Dataset, chunk=16384) -> np.ndarray:
    out = np.empty(len(data))
    cols = 1 - data.actions.astype(np.int64)
    with ag.no_grad():
        for lo in range(0, len(data), chunk):
            hi = min(lo + chunk, len(data))
            h = None if data.hists is None else data.hists[lo:hi]
            logp = _log_softmax_np(policy.forward(data.feats[lo:hi], h).data)
            out[lo:hi] = logp[np.arange(hi - lo), cols[lo:hi]]
    return out


class _MiniBatcher:
    """Without-replacement mini-batch index stream, reshuffled every pass."""

    def __init__(self, n_data, batch, rng):
        self.n = n_data
        self.b = min(batch, n_data)
        self.rng = rng
        self.perm = rng.permutation(n_data)
        self.pos = 0

    def next(self):
        if self.pos + self.b > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.perm[self.pos:self.pos + self.b]
        self.pos += self.b
        return idx


def _subset(data: _Dataset, idx) -> _Dataset:
    return _Dataset(feats=data.feats[idx],
                    hists=None if data.hists is None else data.hists[idx],
                    actions=data.actions[idx], old_logp=data.old_logp[idx],
                    adv=data.adv[idx], returns=data.returns[idx])


def update_policy(policy, data: _Dataset, cfg: PpoConfig, opt: Adam, shuffle_rng):
    """Clipped-surrogate ascent with KL early stopping.

    After every gradient step the KL divergence from the collection policy is
    re-estimated on the minibatch just processed; the loop stops once the
    estimate exceeds 1.5x the target. Returns the number of steps actually
    taken and the final KL estimate.
    """
    batcher = _MiniBatcher(len(data), cfg.batch, shuffle_rng)
    steps, kld = 0, 0.0
    for _ in range(cfg.iters_pi):
        idx = batcher.next()
        sub = _subset(data, idx)
        chosen = _chosen_logp(policy, sub.feats, sub.hists, sub.actions)
        objective = clipped_objective(ag.sub(chosen, Tensor(sub.old_logp)), sub.adv, cfg)
        if not np.isfinite(objective.data):
            raise FloatingPointError("policy objective became non-finite")
        opt.zero_grad()
        ag.backward(ag.neg(objective))
        opt.step()
        steps += 1
        kld = kld_estimate(sub.old_logp, _chosen_logp_np(policy, sub))
        if kld > 1.5 * cfg.kld_target:
            break
    return steps, kld


def update_value(value, data: _Dataset, cfg: PpoConfig, opt: Adam, shuffle_rng) -> float:
    """Mini-batch regression of the value net onto the estimated returns;
    returns the epoch-final mean-squared error over the whole dataset."""
    batcher = _MiniBatcher(len(data), cfg.batch, shuffle_rng)
    for _ in range(cfg.iters_v):
        idx = batcher.next()
        h = None if data.hists is None else data.hists[idx]
        pred = ag.reshape(value.forward(data.feats[idx], h), (idx.size,))
        diff = ag.sub(pred, Tensor(data.returns[idx]))
        loss = ag.mean(ag.mul(diff, diff))
        if not np.isfinite(loss.data):
            raise FloatingPointError("value loss became non-finite")
        opt.zero_grad()
        ag.backward(loss)
        opt.step()
    preds = np.empty(len(data))
    with ag.no_grad():
        for lo in range(0, len(data), 16384):
            hi = min(lo + 16384, len(data))
            h = None if data.hists is None else data.hists[lo:hi]
            preds[lo:hi] = value.forward(data.feats[lo:hi], h).data[:, 0]
    return float(np.mean((data.returns - preds) ** 2))


METRIC_FIELDS = ["epoch", "mean_reward", "mean_current_estimate", "policy_steps",
                 "kld_at_stop", "value_mse", "wall_time_s"]


def train(env_factory: EnvFactory, arch: ArchConfig, cfg: PpoConfig, seed: int,
          out_dir=None, log=None):
    """Full training run; returns (final agent, per-epoch metric rows).

    With an out_dir, per-epoch metrics are appended to metrics.csv and the
    best-so-far (by epoch mean reward) and final agents are checkpointed.
    """
    cfg = cfg.resolved(env_factory.n)
    if arch.out_dim != 2:
        raise ValueError("policy architecture must have out_dim=2")
    root = np.random.SeedSequence(seed)
    init_ss, shuffle_ss, sim_ss = root.spawn(3)
    init_rng = np.random.default_rng(init_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    policy = build_network(arch, init_rng)
    value = build_network(replace(arch, out_dim=1), init_rng)
    opt_pi = Adam([t for _, t in policy.named_params()], lr=cfg.lr_pi)
    opt_v = Adam([t for _, t in value.named_params()], lr=cfg.lr_v)
    meta = {"seed": seed, "epoch": 0, "n": env_factory.n, "tau": env_factory.tau}
    agent = Agent(policy=policy, value=value, meta=meta)

    csv_fh = writer = None
    if out_dir is not None:
        csv_fh = open(f"{out_dir}/metrics.csv", "w", newline="", encoding="utf-8")
        writer = csv.writer(csv_fh)
        writer.writerow(METRIC_FIELDS)

    metrics = []
    best_reward = -np.inf
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            traj_seeds = sim_ss.spawn(1)[0].spawn(cfg.trajectories)
            rollout = collect(env_factory, policy, value, cfg, traj_seeds)
            returns = estimated_return(rollout.rewards, rollout.values, cfg)
            deltas = td_residuals(rollout.rewards, rollout.values, cfg)
            adv = gae(deltas, cfg)
            adv_norm = (adv - adv.mean()) / (adv.std() + 1e-8)
            data = _flatten(rollout, adv_norm, returns)
            steps, kld = update_policy(policy, data, cfg, opt_pi, shuffle_rng)
            value_mse = update_value(value, data, cfg, opt_v, shuffle_rng)
            mean_reward = float(rollout.rewards.mean())
            row = {"epoch": epoch, "mean_reward": mean_reward,
                   "mean_current_estimate": mean_reward / env_factory.params.dt,
                   "policy_steps": steps, "kld_at_stop": kld,
                   "value_mse": value_mse,
                   "wall_time_s": time.perf_counter() - t0}
            metrics.append(row)
            meta["epoch"] = epoch
            if writer is not None:
                writer.writerow([row["epoch"], f"{row['mean_reward']:.17g}",
                                 f"{row['mean_current_estimate']:.17g}", row["policy_steps"],
                                 f"{row['kld_at_stop']:.17g}", f"{row['value_mse']:.17g}",
                                 f"{row['wall_time_s']:.3f}"])
                csv_fh.flush()
            if out_dir is not None and mean_reward > best_reward:
                best_reward = mean_reward
                save_checkpoint(agent, f"{out_dir}/best.ckpt")
            if log is not None:
                log(f"epoch {epoch:4d}  reward/step {mean_reward:.6f}  "
                    f"current {row['mean_current_estimate']:.3f}  pi-steps {steps}  "
                    f"kld {kld:.4f}  v-mse {value_mse:.4g}  {row['wall_time_s']:.1f}s")
    finally:
        if csv_fh is not None:
            csv_fh.close()
    if out_dir is not None:
        save_checkpoint(agent, f"{out_dir}/final.ckpt")
    return agent, metrics
