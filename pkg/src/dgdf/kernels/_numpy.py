"""Pure-numpy implementations of the numeric hot kernels.

Mirrors the call signatures of the compiled core (``_core.pyx``). Used as
the fallback backend when the extension is not built, and as the reference
side of the backend-equivalence tests.
"""
from __future__ import annotations

import numpy as np


def conv2d_forward(x: np.ndarray, kern: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid-padding stride-1 cross-correlation.

    x: (N, H, W), kern: (h, w, C), bias: (C,) -> (N, H-h+1, W-w+1, C)
    """
    n, hh, ww = x.shape
    kh, kw, c = kern.shape
    oh, ow = hh - kh + 1, ww - kw + 1
    out = np.zeros((n, oh, ow, c))
    for a in range(kh):
        for b in range(kw):
            out += x[:, a : a + oh, b : b + ow, None] * kern[a, b]
    out += bias
    return out


def conv2d_backward(
    x: np.ndarray, kern: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input, kernel, and bias."""
    kh, kw, _ = kern.shape
    _, oh, ow, _ = grad_out.shape
    grad_x = np.zeros_like(x)
    grad_k = np.zeros_like(kern)
    for a in range(kh):
        for b in range(kw):
            patch = x[:, a : a + oh, b : b + ow]
            grad_k[a, b] = np.einsum("nij,nijc->c", patch, grad_out)
            grad_x[:, a : a + oh, b : b + ow] += grad_out @ kern[a, b]
    grad_b = grad_out.sum(axis=(0, 1, 2))
    return grad_x, grad_k, grad_b


def segment_sum(data: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    """Scatter-add rows of data into n output rows: out[seg[e]] += data[e]."""
    out = np.zeros((n, data.shape[1]))
    np.add.at(out, seg, data)
    return out
