"""Adam with classic (coupled) L2 weight decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from wanseg.core.tensor import Tensor
from wanseg.errors import ContractError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> None:
    """Update ``params`` in place (their ``data`` arrays are replaced, not mutated)."""
    missing = [k for k in params if grads.get(k) is None]
    if missing:
        raise ContractError(f"adam_step: missing gradient for {missing[:3]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype, copy=False)


class Adam:
    """Optimizer over a named parameter group, reading gradients from ``Tensor.grad``."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, betas=(0.9, 0.99), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        adam_step(self.params, grads, self.state)
