"""Adam for weights, plain/momentum SGD for architecture logits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkernel import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class SGDState:
    momentum: float = 0.0
    buf: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; a missing grad counts as zero."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sgd_step(params: dict[str, Tensor], state: SGDState, lr: float) -> None:
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        if state.momentum:
            buf = state.buf.get(name)
            buf = g.copy() if buf is None else state.momentum * buf + g
            state.buf[name] = buf
            g = buf
        p.data -= lr * g


def zero_grad(params) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.grad = None
