"""Feature transformation network and the four training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .backbone import ClassifierHead, Module, classify
from .feature_space import FeatureSpace, sample_space
from .tensor import Tensor


class NumericError(FloatingPointError):
    """A loss component became NaN or infinite."""


class AftNetwork(Module):
    """Map from previous-model features to current-model features.

    ``residual`` (default): ``x + W2 relu(W1 x + b1) + b2`` with W2 and b2
    zeroed, so the untrained network is exactly the identity.
    ``linear``: ``W x + b`` with W = I and b = 0.
    """

    def __init__(self, dim: int = 48, hidden: int = 96, arch: str = "residual", bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if arch not in ("residual", "linear"):
            raise ValueError(f"unknown AFT architecture {arch!r}")
        self.dim, self.hidden, self.arch = dim, hidden, arch
        if arch == "residual":
            bound = np.sqrt(6.0 / dim)
            self.w1 = Tensor(rng.uniform(-bound, bound, (hidden, dim)), requires_grad=True)
            self.b1 = Tensor(np.zeros(hidden), requires_grad=True) if bias else None
            self.w2 = Tensor(np.zeros((dim, hidden)), requires_grad=True)
            self.b2 = Tensor(np.zeros(dim), requires_grad=True) if bias else None
        else:
            self.w = Tensor(np.eye(dim), requires_grad=True)
            self.b = Tensor(np.zeros(dim), requires_grad=True) if bias else None

    def __call__(self, features) -> Tensor:
        return aft_forward(self, features)

    def apply_numpy(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self(Tensor(x)).data


def aft_forward(net: AftNetwork, features) -> Tensor:
    if not isinstance(features, Tensor):
        features = Tensor(features)
    if features.ndim != 2 or features.shape[1] != net.dim:
        raise T.ShapeError(f"AFT network expects [B, {net.dim}], got {features.shape}")
    if net.arch == "linear":
        return T.linear(features, net.w, net.b)
    h = T.relu(T.linear(features, net.w1, net.b1))
    return features + T.linear(h, net.w2, net.b2)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 5.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class LossBreakdown:
    ce: float
    kfd: float
    trans: float
    fs: float
    total: float
    total_tensor: Optional[Tensor] = None

    def as_row(self) -> dict[str, float]:
        return {"ce": self.ce, "kfd": self.kfd, "trans": self.trans, "fs": self.fs, "total": self.total}


def loss_kfd(f_t: Tensor, f_prev) -> Tensor:
    """Feature distillation: mean L2 distance to the frozen model's features."""
    if isinstance(f_prev, Tensor):
        f_prev = f_prev.detach()
    return T.l2_distance(f_t, f_prev)


def loss_trans(f_t: Tensor, f_prev, net: AftNetwork) -> Tensor:
    """Mean L2 distance between current features and transformed old ones."""
    if isinstance(f_prev, Tensor):
        f_prev = f_prev.detach()
    return T.l2_distance(f_t, aft_forward(net, f_prev))


def loss_fs(net: AftNetwork, space: FeatureSpace, head: ClassifierHead, samples_per_class: int,
            rng: np.random.Generator, require_nonempty: bool = False) -> Tensor:
    """Cross-entropy of the head on transformed draws from the stored space."""
    if len(space) == 0:
        if require_nonempty:
            raise ValueError("feature-space replay requested but no class prototypes are stored")
        return Tensor(0.0)
    rows, labels = sample_space(space, samples_per_class, rng)
    logits = classify(head, aft_forward(net, Tensor(rows)))
    return T.softmax_cross_entropy(logits, labels)


def _value(name: str, x) -> float:
    v = float(x.item() if isinstance(x, Tensor) else x)
    if not math.isfinite(v):
        raise NumericError(f"loss component {name} is {v}")
    return v


def total_loss(ce: Tensor, kfd=None, trans=None, fs=None, weights: LossWeights = LossWeights()) -> LossBreakdown:
    """``ce + alpha*kfd + beta*trans + gamma*fs``; absent terms count as 0."""
    parts = {"ce": ce, "kfd": kfd, "trans": trans, "fs": fs}
    values = {k: (_value(k, v) if v is not None else 0.0) for k, v in parts.items()}
    total = ce
    for name, weight in (("kfd", weights.alpha), ("trans", weights.beta), ("fs", weights.gamma)):
        term = parts[name]
        if term is not None:
            total = total + term * weight
    return LossBreakdown(values["ce"], values["kfd"], values["trans"], values["fs"],
                         _value("total", total), total if isinstance(total, Tensor) else None)
