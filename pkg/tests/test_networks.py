"""Architectures, action rules, and checkpoint persistence."""

import numpy as np
import pytest

import ratchetrl as rl
import ratchetrl.autograd as ag
from ratchetrl.networks import (Agent, ArchConfig, CheckpointFormatError,
                                CheckpointShapeError, CheckpointVersionError,
                                build_network, deterministic_action,
                                load_checkpoint, policy_output, sample_action,
                                save_checkpoint)

PARAMS = rl.RatchetParams()


def _forward(net, psi, hist=None):
    with ag.no_grad():
        return net.forward(psi, hist).data


def test_arch_config_validation():
    with pytest.raises(ValueError):
        ArchConfig(kind="transformer")
    with pytest.raises(ValueError):
        ArchConfig(kind="mlp")  # needs n
    with pytest.raises(ValueError):
        ArchConfig(kind="deepsets", out_dim=3)
    cfg = ArchConfig(kind="deepsets")
    assert cfg.H == 64 and cfg.E == 16 and cfg.out_dim == 2


def test_mlp_zero_weights_gives_even_probabilities():
    net = build_network(ArchConfig(kind="mlp", n=3, H=8), np.random.default_rng(0))
    for _, t in net.named_params():
        t.data[...] = 0.0
    logits = _forward(net, np.random.default_rng(1).standard_normal((3, 2)))
    assert np.array_equal(logits, np.zeros(2))
    out = policy_output(logits)
    assert out.p_on == pytest.approx(0.5, abs=1e-15)


def test_mlp_output_shape_and_input_check():
    net = build_network(ArchConfig(kind="mlp", n=2, H=8), np.random.default_rng(0))
    assert _forward(net, np.zeros((2, 2))).shape == (2,)
    assert _forward(net, np.zeros((5, 2, 2))).shape == (5, 2)
    with pytest.raises(ValueError):
        _forward(net, np.zeros((3, 2)))


def test_mlp_not_permutation_invariant():
    # counterexample search: a random net should distinguish swapped particles
    rng = np.random.default_rng(2)
    net = build_network(ArchConfig(kind="mlp", n=2, H=16), rng)
    found = False
    for _ in range(20):
        psi = rng.standard_normal((2, 2))
        if not np.allclose(_forward(net, psi), _forward(net, psi[::-1].copy()), atol=1e-9):
            found = True
            break
    assert found


@pytest.mark.parametrize("n", [1, 2, 4, 8, 16])
def test_deepsets_permutation_invariance(n):
    rng = np.random.default_rng(3)
    net = build_network(ArchConfig(kind="deepsets", H=16), rng)
    psi = rng.standard_normal((n, 2))
    base = _forward(net, psi)
    for _ in range(100):
        perm = rng.permutation(n)
        assert np.max(np.abs(_forward(net, psi[perm]) - base)) < 1e-12


def test_deepsets_single_row_and_duplication():
    rng = np.random.default_rng(4)
    net = build_network(ArchConfig(kind="deepsets", H=16), rng)
    psi = rng.standard_normal((3, 2))
    base = _forward(net, psi)
    doubled = _forward(net, np.concatenate([psi, psi]))
    assert np.max(np.abs(base - doubled)) < 1e-9
    single = rng.standard_normal((1, 2))
    assert _forward(net, single).shape == (2,)


def test_deepsets_rejects_empty_set():
    net = build_network(ArchConfig(kind="deepsets", H=8), np.random.default_rng(0))
    with pytest.raises(ValueError):
        _forward(net, np.zeros((0, 2)))


def test_rnn_distinguishes_histories_and_keeps_set_invariance():
    rng = np.random.default_rng(5)
    net = build_network(ArchConfig(kind="rnn", H=12, E=4), rng)
    psi = rng.standard_normal((4, 2))
    zeros = _forward(net, psi, np.zeros(6, dtype=int))
    ones = _forward(net, psi, np.ones(6, dtype=int))
    assert not np.allclose(zeros, ones, atol=1e-9)
    perm = rng.permutation(4)
    assert np.max(np.abs(_forward(net, psi[perm], np.zeros(6, dtype=int)) - zeros)) < 1e-12


def test_rnn_single_step_history_and_errors():
    rng = np.random.default_rng(6)
    net = build_network(ArchConfig(kind="rnn", H=8, E=3), rng)
    psi = rng.standard_normal((2, 2))
    out = _forward(net, psi, np.array([1]))
    assert out.shape == (2,)
    with pytest.raises(ValueError):
        _forward(net, psi)  # no history
    with pytest.raises(ValueError):
        _forward(net, psi, np.zeros((1, 0), dtype=int))  # empty history
    with pytest.raises(ValueError):
        _forward(net, psi, np.array([2]))  # bad symbol


@pytest.mark.parametrize("kind", ["mlp", "deepsets", "rnn"])
def test_period_shifted_state_gives_identical_logits(kind):
    rng = np.random.default_rng(7)
    cfg = ArchConfig(kind=kind, n=3 if kind == "mlp" else None, H=12, E=4)
    net = build_network(cfg, rng)
    x = rng.random(3)
    hist = np.array([0, 1]) if kind == "rnn" else None
    a = _forward(net, rl.featurize(x, PARAMS), hist)
    b = _forward(net, rl.featurize(x + PARAMS.L, PARAMS), hist)
    assert np.max(np.abs(a - b)) < 1e-12


def test_value_network_shape():
    rng = np.random.default_rng(8)
    net = build_network(ArchConfig(kind="deepsets", H=8, out_dim=1), rng)
    assert _forward(net, rng.standard_normal((5, 2))).shape == (1,)
    assert _forward(net, rng.standard_normal((7, 5, 2))).shape == (7, 1)


def test_policy_output_invariants_on_random_inputs():
    rng = np.random.default_rng(9)
    nets = [build_network(ArchConfig(kind="mlp", n=2, H=12), rng),
            build_network(ArchConfig(kind="deepsets", H=12), rng),
            build_network(ArchConfig(kind="rnn", H=12, E=4), rng)]
    hist = np.array([1, 0, 1])
    for _ in range(3334):
        psi = rl.featurize(rng.random(2) * 3 - 1, PARAMS)
        for net in nets:
            h = hist if isinstance(net.cfg, ArchConfig) and net.cfg.kind == "rnn" else None
            out = policy_output(_forward(net, psi, h))
            assert 0.0 < out.p_on < 1.0 and 0.0 < out.p_off < 1.0
            assert abs(out.p_on + out.p_off - 1.0) < 1e-12


def test_sample_action_statistics():
    rng = np.random.default_rng(10)
    out = policy_output(np.array([1.3, -0.4]))
    draws = np.array([sample_action(out, rng)[0] for _ in range(100_000)])
    se = np.sqrt(out.p_on * (1 - out.p_on) / draws.size)
    assert abs(draws.mean() - out.p_on) < 3 * se
    alpha, logp = sample_action(out, rng)
    assert logp <= 0.0
    assert logp == pytest.approx(np.log(out.p_on if alpha == 1 else out.p_off))
    near_one = policy_output(np.array([40.0, 0.0]))
    assert all(sample_action(near_one, rng)[0] == 1 for _ in range(100))


def test_deterministic_action_rule():
    assert deterministic_action(policy_output(np.log([0.7, 0.3]))) == 1
    assert deterministic_action(policy_output(np.log([0.3, 0.7]))) == 0
    assert deterministic_action(policy_output(np.zeros(2))) == 0  # exact tie -> off


def _make_agent(kind="deepsets", seed=0, **meta):
    rng = np.random.default_rng(seed)
    cfg = ArchConfig(kind=kind, n=2 if kind == "mlp" else None, H=8, E=3)
    policy = build_network(cfg, rng)
    value = build_network(ArchConfig(kind=kind, n=cfg.n, H=8, E=3, out_dim=1), rng)
    base = {"n": 2, "tau": 0.0, "seed": seed, "epoch": 5}
    base.update(meta)
    return Agent(policy=policy, value=value, meta=base)


@pytest.mark.parametrize("kind", ["mlp", "deepsets", "rnn"])
def test_checkpoint_roundtrip_bit_exact(tmp_path, kind):
    agent = _make_agent(kind)
    path = tmp_path / "net.ckpt"
    save_checkpoint(agent, path)
    loaded = load_checkpoint(path)
    rng = np.random.default_rng(1)
    psi = rng.standard_normal((4, 2, 2))
    hist = np.array([[0, 1], [1, 1], [0, 0], [1, 0]]) if kind == "rnn" else None
    assert np.array_equal(_forward(agent.policy, psi, hist), _forward(loaded.policy, psi, hist))
    assert np.array_equal(_forward(agent.value, psi, hist), _forward(loaded.value, psi, hist))
    assert loaded.meta == agent.meta
    # save -> load -> save is byte-stable
    path2 = tmp_path / "net2.ckpt"
    save_checkpoint(loaded, path2)
    assert path.read_text() == path2.read_text()


def test_checkpoint_deepsets_serves_any_particle_count(tmp_path):
    agent = _make_agent("deepsets")
    save_checkpoint(agent, tmp_path / "d.ckpt")
    loaded = load_checkpoint(tmp_path / "d.ckpt")
    for n in (1, 3, 9):
        assert _forward(loaded.policy, np.random.default_rng(n).standard_normal((n, 2))).shape == (2,)


def test_checkpoint_error_kinds(tmp_path):
    agent = _make_agent()
    path = tmp_path / "net.ckpt"
    save_checkpoint(agent, path)
    text = path.read_text()

    corrupted = tmp_path / "bad_header.ckpt"
    corrupted.write_text(text.replace("RATCHET-CKPT v1", "RATCHET-CKPT v9", 1))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(corrupted)

    truncated = tmp_path / "truncated.ckpt"
    truncated.write_text("\n".join(text.splitlines()[:12]) + "\n")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(truncated)

    wrong_shape = tmp_path / "shape.ckpt"
    wrong_shape.write_text(text.replace("param pi.phi1.weight 8x2",
                                        "param pi.phi1.weight 2x8", 1))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(wrong_shape)


def test_checkpoint_value_blocks_optional(tmp_path):
    agent = _make_agent()
    agent.value = None
    save_checkpoint(agent, tmp_path / "p.ckpt")
    loaded = load_checkpoint(tmp_path / "p.ckpt")
    assert loaded.value is None
