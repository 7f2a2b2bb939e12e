"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``PROTO_SHIFT_KERNELS=python`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if os.environ.get("PROTO_SHIFT_KERNELS", "").lower() == "python" or _ckernels is None:
    _impl = _pykernels
    BACKEND = "python"
else:
    _impl = _ckernels
    BACKEND = "compiled"


def _c64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_2d(name, *arrays):
    for x in arrays:
        if x.ndim != 2:
            raise ValueError(f"{name}: expected 2-d arrays, got shape {x.shape}")


def matmul(a, b):
    a, b = _c64(a), _c64(b)
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return _impl.matmul(a, b)


def pairwise_sq_dist(q, p):
    q, p = _c64(q), _c64(p)
    _check_2d("pairwise_sq_dist", q, p)
    if q.shape[1] != p.shape[1]:
        raise ValueError(f"pairwise_sq_dist: feature dims differ, {q.shape} vs {p.shape}")
    return _impl.pairwise_sq_dist(q, p)


def pairwise_sq_dist_backward(q, p, g):
    q, p, g = _c64(q), _c64(p), _c64(g)
    _check_2d("pairwise_sq_dist_backward", q, p, g)
    if q.shape[1] != p.shape[1] or g.shape != (q.shape[0], p.shape[0]):
        raise ValueError("pairwise_sq_dist_backward: inconsistent shapes")
    return _impl.pairwise_sq_dist_backward(q, p, g)
