"""PPO math (returns, residuals, GAE, clipped objective, KLD) and the update loop."""

import numpy as np
import pytest

import ratchetrl as rl
import ratchetrl.autograd as ag
from ratchetrl.autograd import Tensor
from ratchetrl.networks import ArchConfig, build_network
from ratchetrl.nn import Adam
from ratchetrl.ppo import (EnvFactory, PpoConfig, _chosen_logp, _chosen_logp_np,
                           _flatten, _MiniBatcher, clipped_objective, collect,
                           default_m_b, estimated_return, g_clip, gae,
                           kld_estimate, td_residuals, train, update_policy,
                           update_value)

PARAMS = rl.RatchetParams()


def cfg_with(**kw):
    base = dict(traj_len=8, epochs=1, trajectories=2, batch=64)
    base.update(kw)
    return PpoConfig(**base)


def brute_force_return(rewards, bootstrap, gamma):
    # independent oracle: direct evaluation of the discounted sum
    t_len = len(rewards)
    out = np.empty(t_len)
    for t in range(t_len):
        acc = sum(gamma ** l * rewards[t + l] for l in range(t_len - t))
        out[t] = acc + gamma ** (t_len - t) * bootstrap
    return out


def brute_force_gae(deltas, decay):
    t_len = len(deltas)
    return np.array([sum(decay ** l * deltas[t + l] for l in range(t_len - t))
                     for t in range(t_len)])


def test_default_m_b_table():
    assert default_m_b(1) == (1024, 4096)
    assert default_m_b(2) == (512, 4096)
    assert default_m_b(16) == (64, 2048)
    assert default_m_b(64) == (16, 512)
    assert default_m_b(128) == (8, 256)
    assert default_m_b(4096) == (8, 256)
    assert default_m_b(100) == (8, 256)
    assert default_m_b(3) == (256, 4096)
    with pytest.raises(ValueError):
        default_m_b(0)


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(gamma=1.5)
    with pytest.raises(ValueError):
        PpoConfig(gae_lambda=-0.1)
    with pytest.raises(ValueError):
        PpoConfig(epochs=0)
    cfg = PpoConfig().resolved(64)
    assert (cfg.trajectories, cfg.batch) == (16, 512)


def test_estimated_return_gamma_zero_collapses_to_rewards():
    r = np.array([0.5, -1.0, 2.0])
    v = np.array([9.0, 9.0, 9.0, 9.0])
    out = estimated_return(r, v, cfg_with(gamma=0.0))
    assert np.array_equal(out, r)


def test_estimated_return_worked_example():
    out = estimated_return(np.array([1.0, 1.0]), np.array([0.0, 0.0, 10.0]),
                           cfg_with(gamma=0.5))
    assert out[0] == pytest.approx(4.0, abs=1e-15)
    assert out[1] == pytest.approx(6.0, abs=1e-15)


def test_estimated_return_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t_len = rng.integers(1, 30)
        r = rng.standard_normal(t_len)
        v_boot = rng.standard_normal()
        gamma = rng.random()
        values = np.concatenate([np.zeros(t_len), [v_boot]])
        got = estimated_return(r, values, cfg_with(gamma=gamma))
        want = brute_force_return(r, v_boot, gamma)
        assert np.max(np.abs(got - want)) < 1e-12


def test_td_residuals_examples_and_oracle():
    c = cfg_with(gamma=0.9)
    out = td_residuals(np.array([1.0]), np.array([0.0, 0.0]), c)
    assert out[0] == 1.0
    v = np.full(4, 2.5)
    out = td_residuals(np.zeros(3), v, c)
    assert np.allclose(out, (0.9 - 1.0) * 2.5)
    rng = np.random.default_rng(1)
    r, v = rng.standard_normal(20), rng.standard_normal(21)
    got = td_residuals(r, v, c)
    want = np.array([r[t] + 0.9 * v[t + 1] - v[t] for t in range(20)])
    assert np.max(np.abs(got - want)) < 1e-15
    with pytest.raises(ValueError):
        td_residuals(np.zeros(3), np.zeros(3), c)


def test_gae_limits_and_example():
    rng = np.random.default_rng(2)
    deltas = rng.standard_normal(15)
    c0 = cfg_with(gamma=0.97, gae_lambda=0.0)
    assert np.array_equal(gae(deltas, c0), deltas)
    ex = gae(np.array([1.0, 2.0]), cfg_with(gamma=1.0, gae_lambda=0.5))
    assert np.array_equal(ex, np.array([2.0, 2.0]))
    c = cfg_with(gamma=0.93, gae_lambda=0.7)
    want = brute_force_gae(deltas, 0.93 * 0.7)
    assert np.max(np.abs(gae(deltas, c) - want)) < 1e-12


def test_gae_lambda_one_is_return_minus_baseline():
    rng = np.random.default_rng(3)
    c = cfg_with(gamma=0.999, gae_lambda=1.0)
    for _ in range(200):
        t_len = rng.integers(1, 40)
        r = rng.standard_normal(t_len)
        v = rng.standard_normal(t_len + 1)
        adv = gae(td_residuals(r, v, c), c)
        ret = estimated_return(r, v, c)
        assert np.max(np.abs(adv - (ret - v[:-1]))) < 1e-9


def test_g_clip_examples():
    assert g_clip(0.2, 2.0) == pytest.approx(2.4)
    assert g_clip(0.2, -1.0) == pytest.approx(-0.8)


def test_clipped_objective_at_ratio_one_is_mean_advantage():
    rng = np.random.default_rng(4)
    adv = rng.standard_normal(257)
    obj = clipped_objective(Tensor(np.zeros(257)), adv, cfg_with())
    assert abs(float(obj.data) - adv.mean()) < 1e-12


def test_clipped_objective_binds_on_large_ratio():
    adv = np.array([3.0])
    obj = clipped_objective(Tensor(np.log([2.0])), adv, cfg_with())
    assert float(obj.data) == pytest.approx(1.2 * 3.0, abs=1e-12)


def test_kld_estimate_examples_and_analytic_oracle():
    lp = np.log(np.random.default_rng(5).random(100))
    assert kld_estimate(lp, lp) == 0.0
    assert kld_estimate(lp, lp - 0.3) == pytest.approx(0.3)
    # analytic two-action categorical: D_KL = sum p log(p/q)
    rng = np.random.default_rng(6)
    p, q = np.array([0.7, 0.3]), np.array([0.55, 0.45])
    acts = rng.choice(2, size=200_000, p=p)
    est = kld_estimate(np.log(p[acts]), np.log(q[acts]))
    exact = float(np.sum(p * np.log(p / q)))
    se = np.std(np.log(p[acts] / q[acts]), ddof=1) / np.sqrt(acts.size)
    assert abs(est - exact) < 3 * se


class ForcedOffPolicy:
    """Stub network whose logits always favour 'off' overwhelmingly."""

    def forward(self, psi, history=None):
        b = psi.shape[0] if psi.ndim == 3 else 1
        return Tensor(np.tile([-60.0, 60.0], (b, 1)))


def _tiny_nets(seed=0, n=1):
    rng = np.random.default_rng(seed)
    policy = build_network(ArchConfig(kind="mlp", n=n, H=8), rng)
    value = build_network(ArchConfig(kind="mlp", n=n, H=8, out_dim=1), rng)
    return policy, value


def test_collect_bookkeeping_and_determinism():
    policy, value = _tiny_nets()
    cfg = cfg_with(traj_len=3, trajectories=2)
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    seeds = np.random.SeedSequence(0).spawn(2)
    ro = collect(fac, policy, value, cfg, seeds)
    assert ro.actions.shape == (3, 2)
    assert ro.rewards.shape == (3, 2)
    assert ro.features.shape == (4, 2, 1, 2)
    assert ro.values.shape == (4, 2)
    ro2 = collect(fac, policy, value, cfg, np.random.SeedSequence(0).spawn(2))
    for a, b in zip(vars(ro).values(), vars(ro2).values()):
        if a is not None:
            assert np.array_equal(a, b)


def test_collect_forced_off_behaves_like_free_diffusion():
    _, value = _tiny_nets()
    cfg = cfg_with(traj_len=200, trajectories=16)
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    ro = collect(fac, ForcedOffPolicy(), value, cfg, np.random.SeedSequence(1).spawn(16))
    assert np.all(ro.actions == 0)
    se = ro.rewards.std(ddof=1) / np.sqrt(ro.rewards.size)
    assert abs(ro.rewards.mean()) < 3 * se


def test_collect_rewards_telescope_to_displacement():
    policy, value = _tiny_nets(seed=3)
    cfg = cfg_with(traj_len=100, trajectories=4)
    fac = EnvFactory(params=PARAMS, n=2, tau=0.0)
    policy2, _ = _tiny_nets(seed=3, n=2)
    seeds = np.random.SeedSequence(2).spawn(4)
    ro = collect(fac, policy2, build_network(ArchConfig(kind="mlp", n=2, H=8, out_dim=1),
                                             np.random.default_rng(9)), cfg, seeds)
    # rebuild the same trajectories, replicating collect's stream consumption
    # (one action uniform per trajectory per step before the thermal kicks)
    env = fac(np.random.SeedSequence(2).spawn(4))
    x0 = env.x.copy()
    for t in range(100):
        for rng in env.rngs:
            rng.random()
        env.step(ro.actions[t].astype(np.int64))
    disp = np.mean(env.x - x0, axis=1)
    assert np.max(np.abs(ro.rewards.sum(axis=0) - disp)) < 1e-9


class BrokenPolicy:
    def forward(self, psi, history=None):
        b = psi.shape[0] if psi.ndim == 3 else 1
        return Tensor(np.full((b, 2), np.nan))


def test_collect_aborts_on_nonfinite_logits():
    _, value = _tiny_nets()
    cfg = cfg_with(traj_len=3, trajectories=2)
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    with pytest.raises(FloatingPointError, match="step 0"):
        collect(fac, BrokenPolicy(), value, cfg, np.random.SeedSequence(0).spawn(2))


def test_collect_with_delay_records_histories():
    policy, value = _tiny_nets()
    cfg = cfg_with(traj_len=5, trajectories=2)
    fac = EnvFactory(params=PARAMS, n=1, tau=2e-3)
    ro = collect(fac, policy, value, cfg, np.random.SeedSequence(3).spawn(2))
    assert ro.histories.shape == (6, 2, 2)
    assert np.all(ro.histories[0] == 0)
    # the queue snapshot at step t holds the actions chosen at t-2 and t-1
    assert np.array_equal(ro.histories[1][:, 0], np.zeros(2))
    assert np.array_equal(ro.histories[1][:, 1], ro.actions[0])
    assert np.array_equal(ro.histories[2][:, 0], ro.actions[0])
    assert np.array_equal(ro.histories[2][:, 1], ro.actions[1])
    assert np.array_equal(ro.histories[3][:, 0], ro.actions[1])
    assert np.array_equal(ro.histories[3][:, 1], ro.actions[2])


def _dataset_from(policy, value, cfg, fac, seed):
    ro = collect(fac, policy, value, cfg, np.random.SeedSequence(seed).spawn(cfg.trajectories))
    returns = estimated_return(ro.rewards, ro.values, cfg)
    adv = gae(td_residuals(ro.rewards, ro.values, cfg), cfg)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return _flatten(ro, adv, returns), ro


def test_recomputed_logp_matches_collection_bitwise():
    policy, value = _tiny_nets(seed=5)
    cfg = cfg_with(traj_len=20, trajectories=4)
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    data, ro = _dataset_from(policy, value, cfg, fac, seed=7)
    again = _chosen_logp_np(policy, data)
    assert np.array_equal(again, data.old_logp)
    with ag.no_grad():
        graph = _chosen_logp(policy, data.feats, data.hists, data.actions)
    assert np.array_equal(graph.data, data.old_logp)


def test_first_policy_update_objective_is_mean_normalized_advantage():
    policy, value = _tiny_nets(seed=6)
    cfg = cfg_with(traj_len=16, trajectories=4)
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    data, _ = _dataset_from(policy, value, cfg, fac, seed=8)
    chosen = _chosen_logp(policy, data.feats, data.hists, data.actions)
    obj = clipped_objective(ag.sub(chosen, Tensor(data.old_logp)), data.adv, cfg)
    assert abs(float(obj.data) - data.adv.mean()) < 1e-12
    assert abs(float(obj.data)) < 1e-10  # normalized advantages average to ~0


def test_clipped_gradient_at_old_policy_equals_vanilla_policy_gradient():
    policy, value = _tiny_nets(seed=7)
    cfg = cfg_with(traj_len=10, trajectories=3)
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    data, _ = _dataset_from(policy, value, cfg, fac, seed=9)
    params = [t for _, t in policy.named_params()]

    ag.zero_grads(params)
    chosen = _chosen_logp(policy, data.feats, data.hists, data.actions)
    obj = clipped_objective(ag.sub(chosen, Tensor(data.old_logp)), data.adv, cfg)
    ag.backward(obj)
    clip_grads = [p.grad.copy() for p in params]

    ag.zero_grads(params)
    chosen = _chosen_logp(policy, data.feats, data.hists, data.actions)
    vanilla = ag.mean(ag.mul(chosen, Tensor(data.adv)))
    ag.backward(vanilla)
    for g1, p in zip(clip_grads, params):
        denom = max(np.max(np.abs(g1)), np.max(np.abs(p.grad)), 1e-12)
        assert np.max(np.abs(g1 - p.grad)) / denom < 1e-6


def test_update_policy_zero_lr_keeps_kld_zero_and_runs_all_iters():
    policy, value = _tiny_nets(seed=8)
    cfg = cfg_with(traj_len=16, trajectories=4, iters_pi=7, batch=32)
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    data, _ = _dataset_from(policy, value, cfg, fac, seed=10)
    opt = Adam([t for _, t in policy.named_params()], lr=0.0)
    steps, kld = update_policy(policy, data, cfg, opt, np.random.default_rng(0))
    assert steps == 7
    assert kld == 0.0


def test_update_policy_early_stops_on_large_steps():
    policy, value = _tiny_nets(seed=9)
    cfg = cfg_with(traj_len=32, trajectories=8, iters_pi=200, batch=64, lr_pi=0.05)
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    data, _ = _dataset_from(policy, value, cfg, fac, seed=11)
    opt = Adam([t for _, t in policy.named_params()], lr=cfg.lr_pi)
    steps, kld = update_policy(policy, data, cfg, opt, np.random.default_rng(0))
    assert steps < 200
    assert kld > 1.5 * cfg.kld_target


def test_minibatcher_yields_exact_batches_without_replacement():
    rng = np.random.default_rng(0)
    b = _MiniBatcher(10, 4, rng)
    seen = [b.next() for _ in range(5)]
    assert all(len(s) == 4 for s in seen)
    assert all(len(np.unique(np.concatenate(seen[:2]))) == 8 for _ in [0])


def test_update_value_reduces_mse():
    policy, value = _tiny_nets(seed=10)
    cfg = cfg_with(traj_len=32, trajectories=8, iters_v=60, batch=64)
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    data, _ = _dataset_from(policy, value, cfg, fac, seed=12)
    before = float(np.mean((data.returns - _values_np(value, data)) ** 2))
    opt = Adam([t for _, t in value.named_params()], lr=cfg.lr_v)
    final = update_value(value, data, cfg, opt, np.random.default_rng(1))
    assert final < before


def _values_np(value, data):
    with ag.no_grad():
        return value.forward(data.feats, data.hists).data[:, 0]


def test_train_smoke_reproducible(tmp_path):
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    arch = ArchConfig(kind="mlp", n=1, H=8)
    cfg = cfg_with(traj_len=40, trajectories=8, epochs=2, iters_pi=10, iters_v=10, batch=64)
    out1 = tmp_path / "r1"
    out2 = tmp_path / "r2"
    out1.mkdir(), out2.mkdir()
    agent1, m1 = train(fac, arch, cfg, seed=3, out_dir=out1)
    agent2, m2 = train(fac, arch, cfg, seed=3, out_dir=out2)
    assert [r["mean_reward"] for r in m1] == [r["mean_reward"] for r in m2]
    assert [r["kld_at_stop"] for r in m1] == [r["kld_at_stop"] for r in m2]
    assert (out1 / "best.ckpt").read_text() == (out2 / "best.ckpt").read_text()
    assert (out1 / "final.ckpt").exists()
    rows = (out1 / "metrics.csv").read_text().splitlines()
    assert rows[0] == "epoch,mean_reward,mean_current_estimate,policy_steps,kld_at_stop,value_mse,wall_time_s"
    assert len(rows) == 3
    assert agent1.meta["epoch"] == 2


def test_train_rnn_with_delay_end_to_end():
    from ratchetrl.networks import NetworkPolicy

    fac = EnvFactory(params=PARAMS, n=1, tau=0.005)
    arch = ArchConfig(kind="rnn", H=12, E=4)
    cfg = cfg_with(traj_len=40, trajectories=4, epochs=2, iters_pi=6, iters_v=6, batch=32)
    agent, metrics = train(fac, arch, cfg, seed=2)
    assert len(metrics) == 2
    assert all(np.isfinite(m["mean_reward"]) for m in metrics)
    assert agent.meta["tau"] == 0.005
    rep = rl.evaluate(NetworkPolicy(agent.policy, PARAMS), n=1, tau=0.005,
                      params=PARAMS, duration=0.2, ensemble=2, seed=1)
    assert np.isfinite(rep.current_mean)


def test_train_rejects_value_arch():
    fac = EnvFactory(params=PARAMS, n=1, tau=0.0)
    with pytest.raises(ValueError):
        train(fac, ArchConfig(kind="mlp", n=1, out_dim=1), cfg_with(), seed=0)
