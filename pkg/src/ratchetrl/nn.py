"""Dense layers, a GRU cell, and the Adam optimizer built on the autograd tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def init_linear(fan_in: int, fan_out: int, rng: np.random.Generator):
    """Weight (fan_out, fan_in) and bias (fan_out,), i.i.d. uniform on +-1/sqrt(fan_in)."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    bound = 1.0 / math.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True)
    return w, b


class Linear:
    """Affine map y = x W^T + b for batched row vectors."""

    def __init__(self, fan_in, fan_out, rng):
        self.weight, self.bias = init_linear(fan_in, fan_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, ag.transpose(self.weight)), self.bias)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


def gru_cell(x: Tensor, h: Tensor, w_ih: Tensor, w_hh: Tensor,
             b_ih: Tensor, b_hh: Tensor) -> Tensor:
    """One gated-recurrent-unit step for a batch of inputs.

    Gate layout packs reset, update, candidate blocks row-wise in the weights:
    w_ih is (3*hidden, in), w_hh is (3*hidden, hidden). The candidate applies the
    reset gate after the hidden matmul:

        r = sigmoid(W_r x + b_ir + U_r h + b_hr)
        z = sigmoid(W_z x + b_iz + U_z h + b_hz)
        n = tanh(W_n x + b_in + r * (U_n h + b_hn))
        h' = (1 - z) * n + z * h
    """
    hidden = h.data.shape[-1]
    if w_ih.data.shape[0] != 3 * hidden or w_hh.data.shape != (3 * hidden, hidden):
        raise ValueError(
            f"gru weight shapes {w_ih.data.shape}, {w_hh.data.shape} do not match hidden size {hidden}")
    gi = ag.add(ag.matmul(x, ag.transpose(w_ih)), b_ih)
    gh = ag.add(ag.matmul(h, ag.transpose(w_hh)), b_hh)
    i_r = ag.narrow(gi, 1, 0, hidden)
    i_z = ag.narrow(gi, 1, hidden, hidden)
    i_n = ag.narrow(gi, 1, 2 * hidden, hidden)
    h_r = ag.narrow(gh, 1, 0, hidden)
    h_z = ag.narrow(gh, 1, hidden, hidden)
    h_n = ag.narrow(gh, 1, 2 * hidden, hidden)
    r = ag.sigmoid(ag.add(i_r, h_r))
    z = ag.sigmoid(ag.add(i_z, h_z))
    n = ag.tanh(ag.add(i_n, ag.mul(r, h_n)))
    return ag.add(ag.mul(ag.sub(1.0, z), n), ag.mul(z, h))


class GRUCell:
    """GRU cell with packed weights, initialized uniform on +-1/sqrt(hidden)."""

    def __init__(self, input_size, hidden_size, rng):
        self.hidden_size = hidden_size
        bound = 1.0 / math.sqrt(hidden_size)
        u = lambda *shape: Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self.w_ih = u(3 * hidden_size, input_size)
        self.w_hh = u(3 * hidden_size, hidden_size)
        self.b_ih = u(3 * hidden_size)
        self.b_hh = u(3 * hidden_size)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)

    def params(self):
        return [("w_ih", self.w_ih), ("w_hh", self.w_hh),
                ("b_ih", self.b_ih), ("b_hh", self.b_hh)]


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, st: AdamState):
    """One Adam update with bias correction; mutates the parameter data in place."""
    if not st.m:
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
    st.t += 1
    bc1 = 1.0 - st.beta1 ** st.t
    bc2 = 1.0 - st.beta2 ** st.t
    for p, g, m, v in zip(params, grads, st.m, st.v):
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        p.data -= st.lr * (m / bc1) / (np.sqrt(v / bc2) + st.eps_hat)
    return params


class Adam:
    """Optimizer front end reading gradients straight from the tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps_hat=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps_hat=eps_hat)

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self):
        ag.zero_grads(self.params)
