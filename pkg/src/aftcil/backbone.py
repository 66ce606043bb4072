"""Temporal residual CNN backbone and the expandable classifier head.

MFCC coefficients enter as input channels and every convolution runs along
time only. Layout: an initial conv (kernel 3) with BN + ReLU, then three
residual blocks. Each block is conv(k=9, stride 2) -> BN -> ReLU ->
conv(k=9) -> BN, plus a 1x1 stride-2 projection shortcut with BN + ReLU.
The sum goes through a final ReLU. Global average pooling over time yields
the feature vector.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .container import Entry, read_container, write_container
from .tensor import Tensor


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 40
    channels: tuple[int, ...] = (16, 24, 32, 48)
    first_kernel: int = 3
    block_kernel: int = 9
    block_stride: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def expected_parameter_count(cfg: BackboneConfig) -> int:
    """Closed-form number of trainable backbone parameters."""
    c0 = cfg.channels[0]
    total = cfg.in_channels * c0 * cfg.first_kernel + c0 + 2 * c0
    for c_in, c_out in zip(cfg.channels[:-1], cfg.channels[1:]):
        k = cfg.block_kernel
        total += k * c_in * c_out + 2 * c_out  # conv1 + bn1
        total += k * c_out * c_out + 2 * c_out  # conv2 + bn2
        total += c_in * c_out + 2 * c_out  # projection + bn
    return total


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container with train/eval switching."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module, T.RunningStats)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((prefix + name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for name, value in self._children():
            if isinstance(value, T.RunningStats):
                out.append((prefix + name + ".mean", value.mean))
                out.append((prefix + name + ".var", value.var))
            elif isinstance(value, Module):
                out.extend(value.named_buffers(prefix + name + "."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: p.data for name, p in self.named_parameters()}
        targets.update(self.named_buffers())
        missing = sorted(set(targets) - set(state))
        if missing:
            raise KeyError(f"state is missing {missing}")
        for name, arr in targets.items():
            if arr.shape != state[name].shape:
                raise T.ShapeError(f"{name}: stored shape {state[name].shape} != {arr.shape}")
            arr[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=False):
        self.weight = Tensor(_he_uniform(rng, (c_out, c_in, kernel), c_in * kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running = T.RunningStats(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm1d(x, self.gamma, self.beta, self.running, self.training, self.momentum, self.eps)


class ResidualBlock(Module):
    def __init__(self, c_in: int, c_out: int, cfg: BackboneConfig, rng: np.random.Generator):
        k, s, pad = cfg.block_kernel, cfg.block_stride, cfg.block_kernel // 2
        bn = dict(momentum=cfg.bn_momentum, eps=cfg.bn_eps)
        self.conv1 = Conv1d(c_in, c_out, k, rng, stride=s, padding=pad)
        self.bn1 = BatchNorm1d(c_out, **bn)
        self.conv2 = Conv1d(c_out, c_out, k, rng, stride=1, padding=pad)
        self.bn2 = BatchNorm1d(c_out, **bn)
        self.proj = Conv1d(c_in, c_out, 1, rng, stride=s)
        self.proj_bn = BatchNorm1d(c_out, **bn)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        shortcut = T.relu(self.proj_bn(self.proj(x)))
        return T.relu(h + shortcut)


class BackboneModel(Module):
    def __init__(self, cfg: BackboneConfig = BackboneConfig(), rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        c = cfg.channels
        self.stem = Conv1d(cfg.in_channels, c[0], cfg.first_kernel, rng, padding=cfg.first_kernel // 2, bias=True)
        self.stem_bn = BatchNorm1d(c[0], cfg.bn_momentum, cfg.bn_eps)
        self.blocks = [ResidualBlock(a, b, cfg, rng) for a, b in zip(c[:-1], c[1:])]

    @property
    def feature_dim(self) -> int:
        return self.cfg.feature_dim

    def forward_features(self, x) -> Tensor:
        """[B, in_channels, frames] -> [B, feature_dim]."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim != 3 or x.shape[1] != self.cfg.in_channels:
            raise T.ShapeError(f"backbone expects [B, {self.cfg.in_channels}, frames], got {x.shape}")
        h = T.relu(self.stem_bn(self.stem(x)))
        for block in self.blocks:
            h = block(h)
        return T.global_avg_pool_time(h)

    __call__ = forward_features


class ClassifierHead(Module):
    """Fully connected layer over the features; rows grow as classes arrive."""

    def __init__(self, feature_dim: int, num_classes: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(feature_dim)
        self.weight = Tensor(rng.uniform(-bound, bound, (num_classes, feature_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes), requires_grad=True)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]

    def __call__(self, features: Tensor) -> Tensor:
        return classify(self, features)


def classify(head: ClassifierHead, features) -> Tensor:
    if not isinstance(features, Tensor):
        features = Tensor(features)
    if features.ndim != 2 or features.shape[1] != head.feature_dim:
        raise T.ShapeError(f"head expects [B, {head.feature_dim}] features, got {features.shape}")
    return T.linear(features, head.weight, head.bias)


def expand_head(head: ClassifierHead, n_new: int, rng: np.random.Generator) -> ClassifierHead:
    """New head with the old rows copied verbatim and ``n_new`` fresh rows."""
    if n_new < 1:
        raise ValueError(f"expand_head needs n_new >= 1, got {n_new}")
    bound = 1.0 / np.sqrt(head.feature_dim)
    dtype = head.weight.dtype
    new_rows = rng.uniform(-bound, bound, (n_new, head.feature_dim)).astype(dtype)
    out = ClassifierHead.__new__(ClassifierHead)
    out.weight = Tensor(np.concatenate([head.weight.data, new_rows]), requires_grad=True, dtype=dtype)
    out.bias = Tensor(np.concatenate([head.bias.data, np.zeros(n_new, dtype=dtype)]), requires_grad=True,
                      dtype=dtype)
    out.training = head.training
    return out


class ModelSnapshot:
    """Frozen, eval-only copy of backbone and head from the previous task."""

    def __init__(self, model: BackboneModel, head: ClassifierHead):
        self._model = copy.deepcopy(model).eval()
        self._head = copy.deepcopy(head).eval()
        for p in self._model.parameters() + self._head.parameters():
            p.requires_grad = False
            p.data.setflags(write=False)
        for _, buf in self._model.named_buffers():
            buf.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return self._head.num_classes

    def features(self, x) -> Tensor:
        with T.no_grad():
            return self._model.forward_features(x)

    def logits(self, x) -> Tensor:
        with T.no_grad():
            return classify(self._head, self._model.forward_features(x))


def snapshot(model: BackboneModel, head: ClassifierHead) -> ModelSnapshot:
    return ModelSnapshot(model, head)


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_KIND = "CKPT"


def save_checkpoint(path, model: BackboneModel, head: ClassifierHead, extra: dict[str, np.ndarray] | None = None):
    entries = [Entry("backbone." + k, v, {}) for k, v in model.state_dict().items()]
    entries += [Entry("head." + k, v, {}) for k, v in head.state_dict().items()]
    for k, v in (extra or {}).items():
        entries.append(Entry("extra." + k, np.asarray(v), {}))
    write_container(path, CHECKPOINT_KIND, model.cfg.config_hash(), entries)


def load_checkpoint(path, cfg: BackboneConfig = BackboneConfig()):
    """Rebuild (model, head, extra) from a checkpoint written under ``cfg``."""
    entries = {e.key: e.array for e in read_container(path, CHECKPOINT_KIND, cfg.config_hash())}
    model = BackboneModel(cfg)
    model.load_state_dict({k[len("backbone."):]: v for k, v in entries.items() if k.startswith("backbone.")})
    w = entries["head.weight"]
    head = ClassifierHead(w.shape[1], w.shape[0])
    head.load_state_dict({"weight": w, "bias": entries["head.bias"]})
    extra = {k[len("extra."):]: v for k, v in entries.items() if k.startswith("extra.")}
    return model, head, extra
