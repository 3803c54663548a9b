"""Central finite-difference oracle shared by the gradient tests.

Independent of the tape: it only re-runs the forward function at
perturbed inputs, so it checks the analytic backward without trusting it.
"""

import numpy as np

from promptvision.tensor import Tape, Tensor


def numeric_grad(fn, tensors, index, h=1e-5, max_entries=None, rng=None):
    """Central differences of scalar fn(*tensors) w.r.t. tensors[index].

    Returns (flat entry indices, numeric partials). With max_entries set,
    a random subset of coordinates is probed.
    """
    target = tensors[index]
    flat = target.data.reshape(-1)
    n = flat.size
    if max_entries is not None and max_entries < n:
        idx = (rng or np.random.default_rng(0)).choice(n, size=max_entries, replace=False)
    else:
        idx = np.arange(n)
    grads = np.zeros(len(idx))
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(fn(*tensors).data)
        flat[i] = orig - h
        lo = float(fn(*tensors).data)
        flat[i] = orig
        grads[k] = (hi - lo) / (2 * h)
    return idx, grads


def check_gradients(fn, tensors, rtol=1e-4, h=1e-5, max_entries=None, rng=None):
    """Assert analytic grads of scalar fn(*tensors) match central differences.

    Error metric: |a - n| <= rtol * max(1, |a|, |n|).
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = fn(*tensors)
        tape.backward(loss)
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        assert t.grad is not None, f"input {i} got no gradient"
        idx, num = numeric_grad(fn, tensors, i, h=h, max_entries=max_entries, rng=rng)
        ana = t.grad.reshape(-1)[idx]
        denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(num)))
        err = np.abs(ana - num) / denom
        worst = int(np.argmax(err))
        assert err.max() < rtol, (
            f"input {i} entry {idx[worst]}: analytic {ana[worst]:.8g} vs "
            f"numeric {num[worst]:.8g} (rel err {err.max():.3g})"
        )


def rand_tensor(rng, *shape, scale=1.0, requires_grad=True):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=requires_grad)
