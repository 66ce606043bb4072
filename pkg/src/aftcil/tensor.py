"""Dense tensors with a reverse-mode gradient tape.

Only the operations needed by the temporal CNN and the continual-learning
losses are provided. Broadcasting is limited to bias-add (a 1-D tensor added
along the last axis) and the per-channel affine maps inside ``conv1d`` and
``batch_norm1d``; anything else must be reshaped explicitly.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for new tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised for misuse of the gradient tape."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = ""
        self._freed = False
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._freed = False
        out.name = ""
        out._op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op or 'leaf'})"

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


# -- tape traversal ----------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

    The tape is released afterwards; calling backward again on the same loss
    without a fresh forward pass raises :class:`TapeError`.
    """
    if loss.size != 1:
        raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._freed:
        raise TapeError("backward() already ran on this tape; run a new forward pass first")
    if not loss.requires_grad:
        raise TapeError("loss is detached from the tape (no input requires grad)")

    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(
                    f"internal gradient shape {pg.shape} != {parent.data.shape} in op {node._op}"
                )
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._freed = True
    loss._freed = True


# -- elementwise and reductions ---------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D bias matching ``a``'s last axis."""
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    if a.shape == b.shape:
        def _bw(g):
            return g, g
        return Tensor._from_op(a.data + b.data, (a, b), _bw, "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.ndim - 1))

        def _bw_bias(g):
            return g, g.sum(axis=axes)
        return Tensor._from_op(a.data + b.data, (a, b), _bw_bias, "add_bias")
    if b.ndim == 0:
        def _bw_scalar(g):
            return g, np.asarray(g.sum(), dtype=g.dtype)
        return Tensor._from_op(a.data + b.data, (a, b), _bw_scalar, "add_scalar")
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not compatible (only bias-add broadcasts)")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a)
    _check_same(a, b, "sub")

    def _bw(g):
        return g, -g
    return Tensor._from_op(a.data - b.data, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a Python number."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def _bw_const(g):
            return (g * c,)
        return Tensor._from_op(a.data * c, (a,), _bw_const, "mul_const")
    _check_same(a, b, "mul")

    def _bw(g):
        return g * b.data, g * a.data
    return Tensor._from_op(a.data * b.data, (a, b), _bw, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _bw(g):
        return g @ b.data.T, a.data.T @ g
    return Tensor._from_op(a.data @ b.data, (a, b), _bw, "matmul")


def tensor_sum(x: Tensor) -> Tensor:
    def _bw(g):
        return (np.full_like(x.data, g.reshape(())),)
    return Tensor._from_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), _bw, "sum")


def tensor_mean(x: Tensor) -> Tensor:
    n = x.data.size

    def _bw(g):
        return (np.full_like(x.data, g.reshape(()) / n),)
    return Tensor._from_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,), _bw, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)

    def _bw(g):
        return (g.reshape(x.shape),)
    return Tensor._from_op(out, (x,), _bw, "reshape")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(g):
        return (g * mask,)
    return Tensor._from_op(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), _bw, "relu")


# -- layers ----------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} must be ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)
    return Tensor._from_op(out, parents, _bw, "linear")


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation along the last (time) axis.

    ``x`` is [B, C_in, T], ``weight`` is [C_out, C_in, K]. Returns
    [B, C_out, T_out] with ``T_out = (T + 2*padding - K) // stride + 1``.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d: input must be [B, C_in, T], got {x.shape}")
    if weight.ndim != 3:
        raise ShapeError(f"conv1d: weight must be [C_out, C_in, K], got {weight.shape}")
    batch, c_in, length = x.shape
    c_out, w_in, kernel = weight.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d: input has {c_in} channels but weight expects {w_in}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv1d: need stride >= 1 and padding >= 0 (got {stride}, {padding})")
    if kernel > length + 2 * padding:
        raise ShapeError(f"conv1d: kernel {kernel} longer than padded input {length + 2 * padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d: bias {bias.shape} must be ({c_out},)")

    t_out = conv_output_length(length, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :]
    # [B, T_out, C_in*K]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(batch * t_out, c_in * kernel)
    w_mat = weight.data.reshape(c_out, c_in * kernel)
    out = cols @ w_mat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(batch, t_out, c_out).transpose(0, 2, 1))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g2 = g.transpose(0, 2, 1).reshape(batch * t_out, c_out)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w_mat).reshape(batch, t_out, c_in, kernel)
            gxp = np.zeros_like(xp)
            stop = stride * (t_out - 1) + 1
            for k in range(kernel):
                gxp[:, :, k:k + stop:stride] += gcols[:, :, :, k].transpose(0, 2, 1)
            gx = gxp[:, :, padding:padding + length] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))
    return Tensor._from_op(out, parents, _bw, "conv1d")


class RunningStats:
    """Per-channel running mean/variance owned by a batch-norm layer."""

    def __init__(self, channels: int, dtype=None):
        dtype = dtype or _DEFAULT_DTYPE
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def copy(self) -> "RunningStats":
        other = RunningStats(len(self.mean), self.mean.dtype)
        other.mean = self.mean.copy()
        other.var = self.var.copy()
        return other


def batch_norm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of [B, C, T] over the (B, T) axes.

    In training mode the batch statistics are used and ``running`` is updated
    in place (unbiased variance, exponential average with ``momentum``). In
    eval mode ``running`` is used and left untouched.
    """
    if x.ndim != 3:
        raise ShapeError(f"batch_norm1d: input must be [B, C, T], got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm1d: gamma/beta must be ({channels},)")
    n = x.shape[0] * x.shape[2]
    if n < 1:
        raise ShapeError("batch_norm1d: empty input")

    if training:
        mean = x.data.mean(axis=(0, 2))
        centered = x.data - mean[None, :, None]
        var = (centered * centered).mean(axis=(0, 2))
        unbiased = var * n / (n - 1) if n > 1 else var
        running.mean *= 1.0 - momentum
        running.mean += momentum * mean
        running.var *= 1.0 - momentum
        running.var += momentum * unbiased
    else:
        mean = running.mean
        centered = x.data - mean[None, :, None]
        var = running.var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std[None, :, None]
    out = x_hat * gamma.data[None, :, None] + beta.data[None, :, None]

    def _bw(g):
        g_gamma = (g * x_hat).sum(axis=(0, 2))
        g_beta = g.sum(axis=(0, 2))
        g_xhat = g * gamma.data[None, :, None]
        if training:
            gx = (inv_std[None, :, None] / n) * (
                n * g_xhat
                - g_xhat.sum(axis=(0, 2))[None, :, None]
                - x_hat * (g_xhat * x_hat).sum(axis=(0, 2))[None, :, None]
            )
        else:
            gx = g_xhat * inv_std[None, :, None]
        return gx, g_gamma, g_beta
    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), _bw, "batch_norm1d")


def global_avg_pool_time(x: Tensor) -> Tensor:
    """Mean over the time axis: [B, C, T] -> [B, C]."""
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool_time: input must be [B, C, T], got {x.shape}")
    t = x.shape[2]

    def _bw(g):
        return (np.repeat(g[:, :, None] / t, t, axis=2),)
    return Tensor._from_op(x.data.mean(axis=2), (x,), _bw, "avg_pool_time")


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax of a [B, C] tensor."""
    if x.ndim != 2:
        raise ShapeError(f"softmax: input must be [B, C], got {x.shape}")
    s = _softmax_rows(x.data)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)
    return Tensor._from_op(s, (x,), _bw, "softmax")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [B, C], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for batch of {batch}")
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        i = int(bad[0])
        raise IndexError(f"label {int(labels[i])} at batch index {i} is out of range for {classes} classes")

    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(batch)
    losses = log_norm - shifted[rows, labels]
    value = np.asarray(losses.mean(), dtype=z.dtype)

    def _bw(g):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g.reshape(()) / batch),)
    return Tensor._from_op(value, (logits,), _bw, "softmax_cross_entropy")


def l2_distance(a: Tensor, b) -> Tensor:
    """Batch-mean of the per-row Euclidean norm of ``a - b`` (not squared)."""
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance: shapes {a.shape} and {b.shape} differ")
    if a.ndim != 2:
        raise ShapeError(f"l2_distance: inputs must be [B, D], got {a.shape}")
    diff = a.data - b.data
    norms = np.sqrt((diff * diff).sum(axis=1))
    batch = a.shape[0]
    value = np.asarray(norms.mean(), dtype=a.dtype)

    def _bw(g):
        # subgradient 0 where the rows coincide
        safe = np.where(norms > 0, norms, 1.0)
        unit = np.where((norms > 0)[:, None], diff / safe[:, None], 0.0)
        ga = unit * (g.reshape(()) / batch)
        return ga, -ga
    return Tensor._from_op(value, (a, b), _bw, "l2_distance")
