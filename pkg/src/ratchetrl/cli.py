"""Command-line interface and run-directory management.

Configuration is a flat key=value space: every key can come from a config file
(--config) or a flag, flags win, and the fully resolved snapshot (including
every pinned default) lands in the run directory's manifest so any run can be
reproduced from it alone.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import (AlwaysOff, AlwaysOn, Greedy, Mnd, MndParams,
                        PeriodicSwitching, Threshold)
from .evaluation import (best_of_seeds, boundary_grid, evaluate, sweep, time_trace,
                         write_boundary_csv, write_reports_csv, write_trace_csv)
from .networks import Agent, ArchConfig, NetworkPolicy, load_checkpoint
from .ppo import EnvFactory, PpoConfig, train
from .ratchet import RatchetParams, delay_steps


def _positive(kind):
    def check(v):
        if not v > 0:
            raise ValueError("must be > 0")
        return v
    check.__name__ = kind
    return check


def _non_negative(v):
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _non_positive(v):
    if v > 0:
        raise ValueError("must be <= 0")
    return v


def _unit_interval(v):
    if not 0.0 <= v <= 1.0:
        raise ValueError("must be in [0, 1]")
    return v


def _at_least(n):
    def check(v):
        if v < n:
            raise ValueError(f"must be >= {n}")
        return v
    return check


def _choice(*options):
    def check(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return check


def _int_list(raw):
    return [int(tok) for tok in str(raw).split(",") if tok.strip()]


def _float_list(raw):
    return [float(tok) for tok in str(raw).split(",") if tok.strip()]


def _ident(v):
    return v


# key -> (converter, validator, default); None default means "must be supplied
# by the command handler or stays unset"
KEYS = {
    "seed": (int, _non_negative, 0),
    "seeds": (int, _at_least(1), 1),
    "threads": (int, _at_least(1), None),
    "out": (str, _ident, None),
    "n": (int, _at_least(1), 1),
    "tau": (float, _non_negative, 0.0),
    "potential": (str, _choice("smooth", "sawtooth"), "smooth"),
    "length": (float, _positive("length"), 1.0),
    "u0": (float, _positive("u0"), 5.0),
    "kt": (float, _positive("kt"), 1.0),
    "diffusion": (float, _positive("diffusion"), 1.0),
    "dt": (float, _positive("dt"), 1e-3),
    "duration": (float, _positive("duration"), 50.0),
    "ensemble": (int, _at_least(2), 32),
    "burn_in": (float, _non_negative, 0.0),
    "policy": (str, _choice("periodic", "greedy", "threshold", "mnd", "off", "on"), None),
    "t_on": (float, _positive("t_on"), 0.03),
    "t_off": (float, _positive("t_off"), 0.04),
    "u_on": (float, _non_negative, 0.0),
    "u_off": (float, _non_positive, 0.0),
    "x0": (float, _ident, 0.0),
    "checkpoint": (str, _ident, None),
    "arch": (str, _choice("mlp", "deepsets", "rnn"), "mlp"),
    "hidden": (int, _at_least(1), 64),
    "embed": (int, _at_least(1), 16),
    "epochs": (int, _at_least(1), 400),
    "traj_len": (int, _at_least(1), 2000),
    "trajectories": (int, _at_least(1), None),
    "batch": (int, _at_least(1), None),
    "gamma": (float, _unit_interval, 0.999),
    "gae_lambda": (float, _unit_interval, 0.95),
    "clip_eps": (float, _positive("clip_eps"), 0.2),
    "kld_target": (float, _positive("kld_target"), 0.01),
    "iters_pi": (int, _at_least(1), 625),
    "iters_v": (int, _at_least(1), 625),
    "lr_pi": (float, _non_negative, 3e-4),
    "lr_v": (float, _non_negative, 1e-3),
    "n_list": (_int_list, _ident, None),
    "tau_list": (_float_list, _ident, None),
    "resolution": (int, _at_least(2), 500),
    "runs_dir": (str, _ident, None),
}

_COMMON = ["seed", "threads", "out", "n", "tau",
           "potential", "length", "u0", "kt", "diffusion", "dt"]
_POLICY_KNOBS = ["t_on", "t_off", "u_on", "u_off", "x0"]

COMMAND_KEYS = {
    "simulate": _COMMON + ["policy", "duration", "ensemble", "burn_in"] + _POLICY_KNOBS,
    "train": _COMMON + ["arch", "seeds", "hidden", "embed", "epochs", "traj_len",
                        "trajectories", "batch", "gamma", "gae_lambda", "clip_eps",
                        "kld_target", "iters_pi", "iters_v", "lr_pi", "lr_v"],
    "eval": _COMMON + ["checkpoint", "duration", "ensemble", "burn_in"],
    "sweep": _COMMON + ["policy", "checkpoint", "n_list", "tau_list",
                        "duration", "ensemble", "burn_in"] + _POLICY_KNOBS,
    "boundary": _COMMON + ["policy", "checkpoint", "resolution"] + _POLICY_KNOBS,
    "trace": _COMMON + ["policy", "checkpoint", "duration"] + _POLICY_KNOBS,
    "best-of": _COMMON + ["runs_dir", "duration", "ensemble"],
}

# choices fixed once and echoed into every manifest: Adam moments/epsilon and
# the weight init convention are not part of the config surface
PINNED = {
    "adam_beta1": "0.9",
    "adam_beta2": "0.999",
    "adam_eps": "1e-08",
    "init": "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))",
    "gru_init": "uniform(-1/sqrt(2E), 1/sqrt(2E))",
    "embedding_init": "standard_normal",
    "gaussian_sampler": "pcg64-ziggurat",
}


class ConfigError(ValueError):
    pass


def parse_kv_file(path) -> dict:
    """Flat key=value file; '#' starts a comment, blank lines are skipped."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k] = v
    return values


def resolve_config(command: str, flags: dict, file_values: dict | None = None) -> dict:
    """Merge defaults, config-file values, and flags (flags win) and validate."""
    allowed = COMMAND_KEYS[command]
    merged = {}
    for source, entries in (("config file", file_values or {}), ("flag", flags)):
        for key, raw in entries.items():
            if raw is None:
                continue
            if key not in KEYS or key not in allowed:
                raise ConfigError(f"unknown key {key!r} ({source}) for command {command!r}")
            conv, check, _ = KEYS[key]
            try:
                merged[key] = check(conv(raw))
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid value for key {key!r}: {raw!r} ({e})") from None
    for key in allowed:
        if key not in merged:
            merged[key] = KEYS[key][2]
    if command == "train":
        from .ppo import default_m_b
        m, b = default_m_b(merged["n"])
        if merged["trajectories"] is None:
            merged["trajectories"] = m
        if merged["batch"] is None:
            merged["batch"] = b
    if merged.get("threads") is None:
        merged["threads"] = int(os.environ.get("RATCHET_THREADS", "1"))
    return merged


def params_from(cfg: dict) -> RatchetParams:
    return RatchetParams(L=cfg["length"], U0=cfg["u0"], kT=cfg["kt"],
                         D=cfg["diffusion"], dt=cfg["dt"],
                         potential_kind=cfg["potential"])


def build_baseline(name: str, params: RatchetParams, cfg: dict):
    if name == "periodic":
        return PeriodicSwitching(cfg["t_on"], cfg["t_off"])
    if name == "greedy":
        return Greedy(params)
    if name == "threshold":
        return Threshold(params, u_on=cfg["u_on"], u_off=cfg["u_off"])
    if name == "mnd":
        return Mnd(params, MndParams.for_potential(params, x0=cfg["x0"]))
    if name == "off":
        return AlwaysOff()
    if name == "on":
        return AlwaysOn()
    raise ConfigError(f"unknown policy {name!r}")


def check_compat(agent: Agent, n: int, tau: float, dt: float):
    """Reject checkpoint/evaluation combinations the architecture cannot serve."""
    kind = agent.cfg.kind
    if kind == "mlp" and agent.cfg.n != n:
        raise ConfigError(f"mlp checkpoint was built for n={agent.cfg.n}, asked for n={n}")
    if kind == "rnn" and delay_steps(tau, dt) < 1:
        raise ConfigError("rnn checkpoint needs a positive delay tau (history length >= 1)")


def load_policy(cfg: dict, params: RatchetParams):
    """Policy object plus its display name from either --policy or --checkpoint."""
    if cfg.get("checkpoint"):
        agent = load_checkpoint(cfg["checkpoint"])
        check_compat(agent, cfg["n"], cfg["tau"], params.dt)
        return NetworkPolicy(agent.policy, params), f"ckpt:{agent.cfg.kind}", agent
    if cfg.get("policy"):
        return build_baseline(cfg["policy"], params, cfg), cfg["policy"], None
    raise ConfigError("need either a policy name or a checkpoint")


def make_run_dir(base: str | None, command: str) -> Path:
    if base is None:
        base = f"runs/{command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path = Path(base)
    suffix = 1
    while path.exists():
        suffix += 1
        path = Path(f"{base}-{suffix}")
    path.mkdir(parents=True)
    return path


def write_manifest(run_dir: Path, command: str, cfg: dict, started: float):
    lines = [f"command={command}"]
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, float):
            v = f"{v:.17g}"
        elif isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key}={v}")
    for key in sorted(PINNED):
        lines.append(f"{key}={PINNED[key]}")
    lines.append(f"version={__version__}")
    lines.append(f"numpy_version={np.__version__}")
    lines.append(f"python_version={sys.version.split()[0]}")
    lines.append(f"wall_time_s={time.perf_counter() - started:.3f}")
    (run_dir / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cmd_simulate(cfg):
    started = time.perf_counter()
    run_dir = make_run_dir(cfg["out"], "simulate")
    params = params_from(cfg)
    if cfg["policy"] is None:
        raise ConfigError("simulate needs --policy")
    policy = build_baseline(cfg["policy"], params, cfg)
    report = evaluate(policy, n=cfg["n"], tau=cfg["tau"], params=params,
                      duration=cfg["duration"], ensemble=cfg["ensemble"],
                      seed=cfg["seed"], burn_in=cfg["burn_in"], threads=cfg["threads"])
    write_reports_csv([report], run_dir / "eval.csv")
    write_manifest(run_dir, "simulate", cfg, started)
    print(f"{report.policy}: current {report.current_mean:.4f} "
          f"+- {report.current_std:.4f} D/L  (N={report.n}, tau={report.tau}, "
          f"ensemble={report.ensemble})")
    print(run_dir)
    return 0


def _cmd_train(cfg):
    started = time.perf_counter()
    run_dir = make_run_dir(cfg["out"], "train")
    params = params_from(cfg)
    arch = ArchConfig(kind=cfg["arch"], n=cfg["n"] if cfg["arch"] == "mlp" else None,
                      H=cfg["hidden"], E=cfg["embed"], out_dim=2)
    if cfg["arch"] == "rnn" and delay_steps(cfg["tau"], cfg["dt"]) < 1:
        raise ConfigError("rnn training needs a positive delay tau")
    ppo_cfg = PpoConfig(traj_len=cfg["traj_len"], epochs=cfg["epochs"],
                        gamma=cfg["gamma"], gae_lambda=cfg["gae_lambda"],
                        clip_eps=cfg["clip_eps"], kld_target=cfg["kld_target"],
                        iters_pi=cfg["iters_pi"], iters_v=cfg["iters_v"],
                        lr_pi=cfg["lr_pi"], lr_v=cfg["lr_v"],
                        trajectories=cfg["trajectories"], batch=cfg["batch"])
    env_factory = EnvFactory(params=params, n=cfg["n"], tau=cfg["tau"])
    for i in range(cfg["seeds"]):
        seed = cfg["seed"] + i
        sub = run_dir / f"seed-{seed}"
        sub.mkdir()
        sub_started = time.perf_counter()
        print(f"training seed {seed} -> {sub}")
        train(env_factory, arch, ppo_cfg, seed, out_dir=sub, log=print)
        sub_cfg = dict(cfg, seed=seed, seeds=1)
        write_manifest(sub, "train", sub_cfg, sub_started)
    write_manifest(run_dir, "train", cfg, started)
    print(run_dir)
    return 0


def _cmd_eval(cfg):
    started = time.perf_counter()
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    run_dir = make_run_dir(cfg["out"], "eval")
    params = params_from(cfg)
    policy, name, _ = load_policy(cfg, params)
    report = evaluate(policy, n=cfg["n"], tau=cfg["tau"], params=params,
                      duration=cfg["duration"], ensemble=cfg["ensemble"],
                      seed=cfg["seed"], burn_in=cfg["burn_in"],
                      threads=cfg["threads"], name=name)
    write_reports_csv([report], run_dir / "eval.csv")
    write_manifest(run_dir, "eval", cfg, started)
    print(f"{name}: current {report.current_mean:.4f} +- {report.current_std:.4f} D/L")
    print(run_dir)
    return 0


def _cmd_sweep(cfg):
    started = time.perf_counter()
    if (cfg["n_list"] is None) == (cfg["tau_list"] is None):
        raise ConfigError("sweep needs exactly one of --n-list or --tau-list")
    run_dir = make_run_dir(cfg["out"], "sweep")
    params = params_from(cfg)

    def make_policy(n, tau):
        policy, _, _ = load_policy(dict(cfg, n=n, tau=tau), params)
        return policy

    axis = "n" if cfg["n_list"] is not None else "tau"
    values = cfg["n_list"] if axis == "n" else cfg["tau_list"]
    reports = sweep(make_policy, axis, values, params, n=cfg["n"], tau=cfg["tau"],
                    duration=cfg["duration"], ensemble=cfg["ensemble"],
                    seed=cfg["seed"], threads=cfg["threads"],
                    csv_path=run_dir / "sweep.csv")
    write_manifest(run_dir, "sweep", cfg, started)
    for r in reports:
        print(f"N={r.n} tau={r.tau}: {r.current_mean:.4f} +- {r.current_std:.4f}")
    print(run_dir)
    return 0


def _cmd_boundary(cfg):
    started = time.perf_counter()
    run_dir = make_run_dir(cfg["out"], "boundary")
    params = params_from(cfg)
    if cfg.get("checkpoint"):
        agent = load_checkpoint(cfg["checkpoint"])
        check_compat(agent, cfg["n"], cfg["tau"], params.dt)
        target = agent
    else:
        policy, _, _ = load_policy(cfg, params)
        target = policy
    xs, p_on = boundary_grid(target, cfg["resolution"], params, n=cfg["n"], tau=cfg["tau"])
    write_boundary_csv(xs, p_on, run_dir / "boundary.csv")
    write_manifest(run_dir, "boundary", cfg, started)
    print(run_dir)
    return 0


def _cmd_trace(cfg):
    started = time.perf_counter()
    run_dir = make_run_dir(cfg["out"], "trace")
    params = params_from(cfg)
    if cfg.get("checkpoint"):
        target = load_checkpoint(cfg["checkpoint"])
        check_compat(target, cfg["n"], cfg["tau"], params.dt)
    else:
        target, _, _ = load_policy(cfg, params)
    ts, alphas, values = time_trace(target, cfg["n"], cfg["duration"], params,
                                    tau=cfg["tau"], seed=cfg["seed"])
    write_trace_csv(ts, alphas, values, run_dir / "trace.csv")
    write_manifest(run_dir, "trace", cfg, started)
    print(run_dir)
    return 0


def _cmd_best_of(cfg):
    started = time.perf_counter()
    if not cfg["runs_dir"]:
        raise ConfigError("best-of needs a directory of training runs")
    parent = Path(cfg["runs_dir"])
    run_dirs = sorted(d for d in parent.iterdir() if d.is_dir()
                      and ((d / "best.ckpt").exists() or (d / "final.ckpt").exists()))
    if not run_dirs:
        raise ConfigError(f"no run directories with checkpoints under {parent}")
    run_dir = make_run_dir(cfg["out"], "best-of")
    params = params_from(cfg)
    result = best_of_seeds(run_dirs, params, n=cfg["n"], tau=cfg["tau"],
                           duration=cfg["duration"], ensemble=cfg["ensemble"],
                           seed=cfg["seed"], threads=cfg["threads"])
    shutil.copy(result.path, run_dir / "selected.ckpt")
    write_reports_csv(result.reports, run_dir / "selection.csv")
    write_manifest(run_dir, "best-of", cfg, started)
    print(f"selected run {result.index}: {result.path} "
          f"(current {result.reports[result.index].current_mean:.4f})")
    print(run_dir)
    return 0


_HANDLERS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "boundary": _cmd_boundary,
    "trace": _cmd_trace,
    "best-of": _cmd_best_of,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ratchetrl",
        description="Simulate, train, and benchmark feedback control of a collective flashing ratchet")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, keys in COMMAND_KEYS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="flat key=value config file")
        for key in keys:
            if key == "runs_dir":
                p.add_argument("runs_dir", nargs="?", default=None,
                               help="directory containing training run subdirectories")
            else:
                p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = parse_kv_file(args.config) if args.config else None
        cfg = resolve_config(command, flags, file_values)
        return _HANDLERS[command](cfg)
    except BrokenPipeError:
        return 1
    except Exception as e:  # CLI boundary: report and exit nonzero
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
