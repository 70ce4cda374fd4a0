from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from wanseg.core.tensor import Tensor
from wanseg.errors import ContractError


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               atol: float = 1e-6) -> float:
    """Max relative error between backprop and central differences over every input element.

    ``f`` is called as ``f(*inputs)`` and must return a scalar tensor. Inputs are
    perturbed in place and restored afterwards. The denominator is floored at
    ``atol``: central differences carry roundoff of roughly ``1e-16 * |f| / h``,
    so gradient entries far below that scale are judged on absolute error.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check needs 64-bit inputs")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        base = t.data
        flat = base.reshape(-1).copy()
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            t.data = flat.reshape(base.shape)
            up = float(f(*inputs).data)
            flat[i] = orig - h
            t.data = flat.reshape(base.shape)
            down = float(f(*inputs).data)
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        t.data = base
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), atol)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
