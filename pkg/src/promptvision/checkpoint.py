"""Checkpoint archive: flat npz mapping dotted paths to float64 arrays.

Layout (all entries are standard .npy payloads inside the zip, little
endian float64 unless noted):

    param/<dotted parameter path>   model weights
    opt/m/<path>, opt/v/<path>      Adam first/second moments
    opt/t/<path>                    per-parameter update counts (int64)
    opt/step                        global optimizer step (int64 scalar)
    meta/<key>                      training bookkeeping (int64/float64 scalars)

Any npz reader (numpy, or a zip + npy parser) can load it.
"""

from __future__ import annotations

import numpy as np

from .optim import OptimizerState
from .tensor import Tensor


def save_checkpoint(path, params: dict[str, Tensor], opt_state: OptimizerState | None = None,
                    meta: dict | None = None):
    arrays = {f"param/{k}": p.data for k, p in params.items()}
    if opt_state is not None:
        for k, m in opt_state.m.items():
            arrays[f"opt/m/{k}"] = m
        for k, v in opt_state.v.items():
            arrays[f"opt/v/{k}"] = v
        for k, t in opt_state.t.items():
            arrays[f"opt/t/{k}"] = np.int64(t)
        arrays["opt/step"] = np.int64(opt_state.step)
    for k, v in (meta or {}).items():
        arrays[f"meta/{k}"] = np.asarray(v)
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Return (params: name->ndarray, opt_state or None, meta: dict)."""
    with np.load(path) as z:
        params = {}
        meta = {}
        opt = OptimizerState()
        has_opt = False
        for key in z.files:
            if key.startswith("param/"):
                params[key[len("param/"):]] = z[key].astype(np.float64)
            elif key.startswith("opt/m/"):
                opt.m[key[len("opt/m/"):]] = z[key].astype(np.float64)
                has_opt = True
            elif key.startswith("opt/v/"):
                opt.v[key[len("opt/v/"):]] = z[key].astype(np.float64)
                has_opt = True
            elif key.startswith("opt/t/"):
                opt.t[key[len("opt/t/"):]] = int(z[key])
                has_opt = True
            elif key == "opt/step":
                opt.step = int(z[key])
                has_opt = True
            elif key.startswith("meta/"):
                v = z[key]
                meta[key[len("meta/"):]] = v.item() if v.ndim == 0 else v
    return params, (opt if has_opt else None), meta


def restore_params(model_params: dict[str, Tensor], loaded: dict[str, np.ndarray]):
    """Copy loaded arrays into model tensors; shapes must match exactly."""
    missing = set(model_params) - set(loaded)
    extra = set(loaded) - set(model_params)
    if missing or extra:
        raise ValueError(
            f"checkpoint mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}"
        )
    for name, p in model_params.items():
        arr = loaded[name]
        if arr.shape != p.data.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
        p.data = arr.copy()
