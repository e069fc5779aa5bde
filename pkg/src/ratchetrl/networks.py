"""Policy and value network architectures, action rules, and checkpoint files.

Three architectures share a common calling convention: `forward(psi, history)`
where psi is a (B, N, 2) feature batch and history an optional (B, d) integer
batch of pending on-off actions. Logit index 0 is "potential on", index 1 "off".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import GRUCell, Linear
from .ratchet import featurize

ARCH_KINDS = ("mlp", "deepsets", "rnn")


@dataclass(frozen=True)
class ArchConfig:
    kind: str
    n: int | None = None      # particle count, structural for mlp only
    H: int = 64
    E: int = 16               # history embedding width, rnn only
    out_dim: int = 2

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.kind == "mlp" and (self.n is None or self.n < 1):
            raise ValueError("mlp needs a fixed particle count n >= 1")
        if self.out_dim not in (1, 2):
            raise ValueError(f"out_dim must be 1 or 2, got {self.out_dim}")
        if self.H < 1 or self.E < 1:
            raise ValueError("H and E must be >= 1")


def _promote_psi(psi):
    psi = np.asarray(psi, dtype=np.float64)
    if psi.ndim == 2:
        return psi[None], True
    if psi.ndim == 3:
        return psi, False
    raise ValueError(f"expected (N, 2) or (B, N, 2) features, got shape {psi.shape}")


class MlpNet:
    """Two-hidden-layer perceptron over the flattened feature vector."""

    def __init__(self, cfg: ArchConfig, rng):
        self.cfg = cfg
        self.fc1 = Linear(2 * cfg.n, cfg.H, rng)
        self.fc2 = Linear(cfg.H, cfg.H, rng)
        self.out = Linear(cfg.H, cfg.out_dim, rng)

    def forward(self, psi, history=None) -> Tensor:
        psi, single = _promote_psi(psi)
        b, n, _ = psi.shape
        if n != self.cfg.n:
            raise ValueError(f"mlp built for n={self.cfg.n} got {n} particles")
        x = Tensor(psi.reshape(b, 2 * n))
        h = ag.relu(self.fc1(x))
        h = ag.relu(self.fc2(h))
        logits = self.out(h)
        return ag.reshape(logits, (self.cfg.out_dim,)) if single else logits

    def named_params(self):
        out = []
        for lname, layer in (("fc1", self.fc1), ("fc2", self.fc2), ("out", self.out)):
            out += [(f"{lname}.{p}", t) for p, t in layer.params()]
        return out


class DeepSetsNet:
    """Shared per-particle encoder, mean pool, then a head; works for any N."""

    def __init__(self, cfg: ArchConfig, rng):
        self.cfg = cfg
        self.phi1 = Linear(2, cfg.H, rng)
        self.phi2 = Linear(cfg.H, cfg.H, rng)
        self.rho = Linear(cfg.H, cfg.H, rng)
        self.out = Linear(cfg.H, cfg.out_dim, rng)

    def trunk(self, psi_batch: np.ndarray) -> Tensor:
        """Encoded set representation (B, H): per-row MLP then mean over rows."""
        b, n, _ = psi_batch.shape
        if n < 1:
            raise ValueError("deepsets needs at least one particle")
        x = Tensor(psi_batch.reshape(b * n, 2))
        h = ag.relu(self.phi1(x))
        h = self.phi2(h)
        return ag.mean(ag.reshape(h, (b, n, self.cfg.H)), axis=1)

    def forward(self, psi, history=None) -> Tensor:
        psi, single = _promote_psi(psi)
        pooled = self.trunk(psi)
        logits = self.out(ag.relu(self.rho(pooled)))
        return ag.reshape(logits, (self.cfg.out_dim,)) if single else logits

    def named_params(self):
        out = []
        for lname, layer in (("phi1", self.phi1), ("phi2", self.phi2),
                             ("rho", self.rho), ("out", self.out)):
            out += [(f"{lname}.{p}", t) for p, t in layer.params()]
        return out


class RnnNet:
    """DeepSets trunk for positions plus a GRU over the pending-action history.

    The history tokens are embedded (2 symbols -> E), run through a GRU with
    hidden width 2E from a zero initial state, and the last hidden state is
    concatenated with the pooled set representation before the output head.
    """

    def __init__(self, cfg: ArchConfig, rng):
        self.cfg = cfg
        self.phi1 = Linear(2, cfg.H, rng)
        self.phi2 = Linear(cfg.H, cfg.H, rng)
        self.embed = Tensor(rng.standard_normal((2, cfg.E)), requires_grad=True)
        self.gru = GRUCell(cfg.E, 2 * cfg.E, rng)
        self.head = Linear(cfg.H + 2 * cfg.E, cfg.H, rng)
        self.out = Linear(cfg.H, cfg.out_dim, rng)

    def _set_trunk(self, psi_batch: np.ndarray) -> Tensor:
        b, n, _ = psi_batch.shape
        if n < 1:
            raise ValueError("rnn trunk needs at least one particle")
        x = Tensor(psi_batch.reshape(b * n, 2))
        h = ag.relu(self.phi1(x))
        h = self.phi2(h)
        return ag.mean(ag.reshape(h, (b, n, self.cfg.H)), axis=1)

    def forward(self, psi, history=None) -> Tensor:
        psi, single = _promote_psi(psi)
        if history is None:
            raise ValueError("rnn policy needs the on-off history")
        hist = np.asarray(history)
        if hist.ndim == 1:
            hist = hist[None]
        if hist.shape[0] != psi.shape[0] or hist.shape[1] < 1:
            raise ValueError(
                f"history shape {hist.shape} incompatible with feature batch {psi.shape}")
        if hist.size and (hist.min() < 0 or hist.max() > 1):
            raise ValueError("history symbols must be 0 or 1")
        pooled = self._set_trunk(psi)
        h = Tensor(np.zeros((psi.shape[0], 2 * self.cfg.E)))
        for k in range(hist.shape[1]):
            x_k = ag.embedding_lookup(self.embed, hist[:, k].astype(np.int64))
            h = self.gru(x_k, h)
        cat = ag.concat([pooled, h], axis=1)
        logits = self.out(ag.relu(self.head(cat)))
        return ag.reshape(logits, (self.cfg.out_dim,)) if single else logits

    def named_params(self):
        out = [(f"phi1.{p}", t) for p, t in self.phi1.params()]
        out += [(f"phi2.{p}", t) for p, t in self.phi2.params()]
        out.append(("embed.table", self.embed))
        out += [(f"gru.{p}", t) for p, t in self.gru.params()]
        out += [(f"head.{p}", t) for p, t in self.head.params()]
        out += [(f"out.{p}", t) for p, t in self.out.params()]
        return out


_ARCH_CLASSES = {"mlp": MlpNet, "deepsets": DeepSetsNet, "rnn": RnnNet}


def build_network(cfg: ArchConfig, rng):
    return _ARCH_CLASSES[cfg.kind](cfg, rng)


def mlp_forward(psi, net: MlpNet) -> Tensor:
    return net.forward(psi)


def deepsets_forward(psi, net: DeepSetsNet) -> Tensor:
    return net.forward(psi)


def rnn_forward(psi, history, net: RnnNet) -> Tensor:
    return net.forward(psi, history)


@dataclass
class PolicyOutput:
    p_on: float
    p_off: float
    logits: np.ndarray


def policy_output(logits) -> PolicyOutput:
    """Convert a 2-logit vector into switching probabilities (index 0 = on)."""
    z = np.asarray(logits, dtype=np.float64).reshape(2)
    z = z - z.max()
    e = np.exp(z)
    p = e / e.sum()
    return PolicyOutput(p_on=float(p[0]), p_off=float(p[1]), logits=z)


def sample_action(out: PolicyOutput, rng: np.random.Generator):
    """Draw alpha from (p_on, p_off); returns (alpha, log prob of the choice)."""
    if rng.random() < out.p_on:
        return 1, math.log(out.p_on)
    return 0, math.log(out.p_off)


def deterministic_action(out: PolicyOutput) -> int:
    """Test-time rule: on iff p_on > 0.5 (the measure-zero tie resolves to off)."""
    return 1 if out.p_on > 0.5 else 0


class NetworkPolicy:
    """Adapter running a policy network inside the evaluation loop."""

    def __init__(self, net, params, deterministic=True):
        self.net = net
        self.params = params
        self.deterministic = deterministic

    def reset(self, m):
        pass

    def actions(self, t, x, history):
        psi = featurize(x, self.params)
        with ag.no_grad():
            logits = self.net.forward(psi, history).data
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("policy network produced non-finite logits")
        if not self.deterministic:
            raise NotImplementedError("evaluation policies act deterministically")
        return (logits[:, 0] > logits[:, 1]).astype(np.int64)


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


_CKPT_MAGIC = "RATCHET-CKPT v1"


@dataclass
class Agent:
    """A trained policy network with its companion value network and metadata."""

    policy: object
    value: object = None
    meta: dict = field(default_factory=dict)

    @property
    def cfg(self) -> ArchConfig:
        return self.policy.cfg


def save_checkpoint(agent: Agent, path):
    """Write the line-oriented text checkpoint; floats keep full 17-digit precision."""
    cfg = agent.cfg
    meta = agent.meta
    lines = [_CKPT_MAGIC,
             f"arch={cfg.kind}",
             f"H={cfg.H}",
             f"E={cfg.E}",
             f"out_dim={cfg.out_dim}",
             f"n={meta.get('n', cfg.n if cfg.n is not None else 0)}",
             f"tau={meta.get('tau', 0.0):.17g}",
             f"seed={meta.get('seed', 0)}",
             f"epoch={meta.get('epoch', 0)}"]
    blocks = [("pi", agent.policy)]
    if agent.value is not None:
        blocks.append(("vf", agent.value))
    for prefix, net in blocks:
        for name, tensor in net.named_params():
            arr = tensor.data
            dims = "x".join(str(d) for d in arr.shape)
            lines.append(f"param {prefix}.{name} {dims}")
            if arr.ndim <= 1:
                lines.append(" ".join(f"{v:.17g}" for v in np.atleast_1d(arr)))
            else:
                for row in arr.reshape(arr.shape[0], -1):
                    lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> Agent:
    """Parse a checkpoint back into an Agent; distinct errors for version, truncation, shape."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CKPT_MAGIC:
        raise CheckpointVersionError(
            f"{path}: bad or missing header (expected {_CKPT_MAGIC!r})")
    header = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("param "):
        line = lines[i].strip()
        if line:
            if "=" not in line:
                raise CheckpointFormatError(f"{path}: malformed header line {line!r}")
            k, v = line.split("=", 1)
            header[k] = v
        i += 1
    required = ("arch", "H", "E", "out_dim", "n", "tau", "seed", "epoch")
    missing = [k for k in required if k not in header]
    if missing:
        raise CheckpointFormatError(f"{path}: header missing keys {missing}")

    params = {}
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 3 or parts[0] != "param":
            raise CheckpointFormatError(f"{path}: expected a param block at line {i + 1}")
        name, dims = parts[1], parts[2]
        shape = tuple(int(d) for d in dims.split("x"))
        count = int(np.prod(shape))
        values = []
        i += 1
        while len(values) < count:
            if i >= len(lines):
                raise CheckpointFormatError(f"{path}: truncated values for param {name}")
            values.extend(float(tok) for tok in lines[i].split())
            i += 1
        if len(values) != count:
            raise CheckpointFormatError(f"{path}: too many values for param {name}")
        params[name] = np.array(values).reshape(shape)

    kind = header["arch"]
    n = int(header["n"])
    cfg = ArchConfig(kind=kind, n=n if kind == "mlp" else (n or None),
                     H=int(header["H"]), E=int(header["E"]),
                     out_dim=int(header["out_dim"]))
    meta = {"n": n, "tau": float(header["tau"]),
            "seed": int(header["seed"]), "epoch": int(header["epoch"])}
    rng = np.random.default_rng(0)
    policy = build_network(cfg, rng)
    _fill(policy, "pi", params, path)
    value = None
    if any(k.startswith("vf.") for k in params):
        vcfg = ArchConfig(kind=cfg.kind, n=cfg.n, H=cfg.H, E=cfg.E, out_dim=1)
        value = build_network(vcfg, rng)
        _fill(value, "vf", params, path)
    if params:
        raise CheckpointFormatError(f"{path}: unused param blocks {sorted(params)}")
    return Agent(policy=policy, value=value, meta=meta)


def _fill(net, prefix, params, path):
    for name, tensor in net.named_params():
        key = f"{prefix}.{name}"
        if key not in params:
            raise CheckpointFormatError(f"{path}: missing param block {key}")
        arr = params.pop(key)
        if arr.shape != tensor.data.shape:
            raise CheckpointShapeError(
                f"{path}: param {key} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr
        tensor.grad = np.zeros_like(arr)
