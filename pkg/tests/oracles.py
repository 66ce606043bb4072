"""Independent reference computations used by the tests.

Nothing here calls the tape's backward pass: gradients are central finite
differences of forward values only.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


def central_difference(fn: Callable[[], float], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Numerical gradient of ``fn`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            up = fn()
            arr[idx] = orig - h
            down = fn()
            arr[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def naive_conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Loop-based cross-correlation."""
    batch, c_in, length = x.shape
    c_out, _, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    t_out = (length + 2 * padding - k) // stride + 1
    out = np.zeros((batch, c_out, t_out))
    for n in range(batch):
        for o in range(c_out):
            for t in range(t_out):
                s = b[o]
                for c in range(c_in):
                    for j in range(k):
                        s += w[o, c, j] * xp[n, c, t * stride + j]
                out[n, o, t] = s
    return out


def gem_bwt(r: np.ndarray) -> float:
    """Backward transfer from a full T x T accuracy matrix, by explicit loop."""
    t = r.shape[0]
    total = 0.0
    for i in range(t - 1):
        total += r[t - 1, i] - r[i, i]
    return total / (t - 1)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)
