"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, TensorError


class OptimizerState:
    """Per-parameter Adam moments keyed by parameter name.

    `t` counts updates per parameter so that bias correction restarts
    cleanly for parameters that join late (e.g. after an unfreeze).
    """

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}


def adamw_step(params: dict[str, Tensor], state: OptimizerState, lr: float):
    """One decoupled-weight-decay Adam update over `params`.

    Every parameter must carry a gradient; gradients are left untouched
    (the caller zeroes them).
    """
    b1, b2 = state.betas
    state.step += 1
    for name, p in params.items():
        if p.grad is None:
            raise TensorError(f"adamw_step: parameter {name!r} has no gradient")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * p.grad
        v *= b2
        v += (1 - b2) * p.grad * p.grad
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * mhat / (np.sqrt(vhat) + state.eps)


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale `grads` (ndarrays, in place) so their joint L2 norm <= max_norm.

    Returns the applied factor (1.0 when no clipping was needed or the
    set is empty).
    """
    if max_norm <= 0:
        raise TensorError(f"clip_global_norm: max_norm must be positive, got {max_norm}")
    grads = list(grads)
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for g in grads:
        g *= factor
    return factor
