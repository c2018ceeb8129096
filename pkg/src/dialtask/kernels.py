"""Hot-path numerical kernels with a compiled core and a pure-numpy fallback.

The encoder's inner loop spends most of its non-BLAS time in GELU, row-wise
softmax and layer normalization (plus their backward passes). A Cython
extension (``dialtask._ckernels``) implements single-pass fused versions; when
the compiled module is present the softmax and layernorm kernels are bound to
it at import time, otherwise the numpy implementations below are used. GELU
stays on numpy either way: it is one transcendental per element and numpy's
vectorized tanh outruns the extension's scalar loop (see
benchmarks/bench_kernels.py, which times both). Both backends compute the same
formulas and agree to ~1e-12; within one backend results are bit-reproducible.

Set ``DIALTASK_PURE=1`` to force the numpy path everywhere (used by the
benchmark and the backend-parity tests). ``backend()`` reports which path is
active.
"""

from __future__ import annotations

import os

import numpy as np

# sqrt(2/pi), for the tanh form of GELU
_GELU_C = 0.7978845608028654
_GELU_A = 0.044715


def gelu_numpy(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_grad_numpy(x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def softmax_rows_numpy(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis of a 2-D array."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad_numpy(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    inner = (dp * p).sum(axis=1, keepdims=True)
    return p * (dp - inner)


def layernorm_rows_numpy(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5):
    """Per-row layer norm. Returns (y, xhat, rstd) with xhat/rstd kept for backward."""
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gain + bias, xhat, rstd


def layernorm_rows_grad_numpy(dy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gain: np.ndarray):
    """Backward of layernorm_rows. Returns (dx, dgain, dbias)."""
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd * (dxhat - m1 - xhat * m2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


_BACKEND = "numpy"
gelu = gelu_numpy
gelu_grad = gelu_grad_numpy
softmax_rows = softmax_rows_numpy
softmax_rows_grad = softmax_rows_grad_numpy
layernorm_rows = layernorm_rows_numpy
layernorm_rows_grad = layernorm_rows_grad_numpy

if not os.environ.get("DIALTASK_PURE"):
    try:
        from dialtask import _ckernels

        # gelu/gelu_grad deliberately stay on numpy (see module docstring).
        softmax_rows = _ckernels.softmax_rows
        softmax_rows_grad = _ckernels.softmax_rows_grad
        layernorm_rows = _ckernels.layernorm_rows
        layernorm_rows_grad = _ckernels.layernorm_rows_grad
        _BACKEND = "compiled"
    except ImportError:
        pass


def backend() -> str:
    """Name of the active kernel backend: "compiled" or "numpy"."""
    return _BACKEND
