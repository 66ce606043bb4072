"""Exemplar-free per-class feature store: prototypes, sampling, transformation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as T
from .backbone import BackboneModel, ClassifierHead, classify

log = logging.getLogger(__name__)


@dataclass
class ClassPrototype:
    class_id: int
    mean: np.ndarray
    radius: np.ndarray
    n_total: int
    n_selected: int
    built_at_task: int = 0
    transform_count: int = 0

    def __post_init__(self):
        if self.n_total < 1:
            raise ValueError(f"class {self.class_id}: prototype needs at least one sample")
        if not 0 < self.n_selected <= self.n_total:
            raise ValueError(f"class {self.class_id}: n_selected={self.n_selected} outside 1..{self.n_total}")
        if np.any(self.radius < 0):
            raise ValueError(f"class {self.class_id}: negative radius")


class FeatureSpace:
    """One prototype per learned class."""

    def __init__(self, prototypes: Iterable[ClassPrototype] = ()):
        self._protos: dict[int, ClassPrototype] = {}
        for p in prototypes:
            self._protos[p.class_id] = p

    def __len__(self) -> int:
        return len(self._protos)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._protos

    def __getitem__(self, class_id: int) -> ClassPrototype:
        return self._protos[class_id]

    @property
    def class_ids(self) -> list[int]:
        return sorted(self._protos)

    @property
    def prototypes(self) -> list[ClassPrototype]:
        return [self._protos[c] for c in self.class_ids]

    def add(self, prototypes: Iterable[ClassPrototype]) -> None:
        for p in prototypes:
            if p.class_id in self._protos:
                raise ValueError(f"class {p.class_id} already has a prototype")
            self._protos[p.class_id] = p

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            dim = len(self.prototypes[0].mean) if self._protos else 0
            writer.writerow(["class_id", "n_total", "n_selected", "built_at_task", "transform_count"]
                            + [f"mean_{i}" for i in range(dim)] + [f"radius_{i}" for i in range(dim)])
            for p in self.prototypes:
                writer.writerow([p.class_id, p.n_total, p.n_selected, p.built_at_task, p.transform_count]
                                + [repr(float(v)) for v in p.mean] + [repr(float(v)) for v in p.radius])


def extract_features(model: BackboneModel, head: ClassifierHead, x: np.ndarray, batch_size: int = 256):
    """Eval-mode features and logits for an array of inputs [N, C, F]."""
    was_training = model.training
    model.eval()
    feats, logits = [], []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            f = model.forward_features(T.Tensor(x[start:start + batch_size]))
            feats.append(f.data)
            logits.append(classify(head, f).data)
    model.train(was_training)
    return np.concatenate(feats), np.concatenate(logits)


def prototypes_from_features(
    features: np.ndarray,
    labels: np.ndarray,
    predictions: Optional[np.ndarray] = None,
    selective: bool = False,
    radius_mode: str = "diagonal",
    task_index: int = 0,
) -> list[ClassPrototype]:
    """Per-class mean and radius.

    The radius is always the population std over every sample of the class.
    With ``selective`` the mean uses only samples whose prediction equals the
    label, falling back to all samples when none are correct.
    """
    if radius_mode not in ("diagonal", "scalar"):
        raise ValueError(f"unknown radius_mode {radius_mode!r}")
    labels = np.asarray(labels)
    out = []
    for cls in np.unique(labels):
        rows = features[labels == cls]
        if len(rows) == 0:
            raise ValueError(f"class {cls} has no samples")
        radius = rows.std(axis=0)
        if radius_mode == "scalar":
            radius = np.full_like(radius, np.sqrt(np.mean(radius ** 2)))
        keep = np.ones(len(rows), dtype=bool)
        if selective:
            if predictions is None:
                raise ValueError("selective prototypes need model predictions")
            keep = np.asarray(predictions)[labels == cls] == cls
            if not keep.any():
                log.warning("class %s: no correctly classified sample; using all %d for the mean", cls, len(rows))
                keep[:] = True
        out.append(ClassPrototype(int(cls), rows[keep].mean(axis=0), radius, len(rows), int(keep.sum()),
                                  built_at_task=task_index))
    return out


def build_prototypes(
    model: BackboneModel,
    head: ClassifierHead,
    x: np.ndarray,
    labels: np.ndarray,
    selective: bool,
    radius_mode: str = "diagonal",
    task_index: int = 0,
    confidence_threshold: Optional[float] = None,
) -> list[ClassPrototype]:
    """Prototypes of the classes in ``labels`` under the current model.

    ``confidence_threshold`` additionally requires the softmax probability of
    the true class to reach the threshold before a sample counts as selected.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("build_prototypes: no samples")
    feats, logits = extract_features(model, head, x)
    preds = logits.argmax(axis=1)
    if confidence_threshold is not None:
        probs = T._softmax_rows(logits)
        confident = probs[np.arange(len(labels)), labels] >= confidence_threshold
        preds = np.where(confident, preds, -1)
    return prototypes_from_features(feats, labels, preds, selective, radius_mode, task_index)


def sample_reparam(proto: ClassPrototype, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``n`` draws of mean + radius * eps, eps ~ N(0, I)."""
    if n < 1:
        raise ValueError(f"sample_reparam needs n >= 1, got {n}")
    eps = rng.standard_normal((n, len(proto.mean)))
    rows = proto.mean[None, :] + proto.radius[None, :] * eps
    return rows, np.full(n, proto.class_id, dtype=np.int64)


def sample_space(space: FeatureSpace, n_per_class: int, rng: np.random.Generator):
    """Draws for every stored class, concatenated in class-id order."""
    rows, labels = [], []
    for p in space.prototypes:
        r, y = sample_reparam(p, n_per_class, rng)
        rows.append(r)
        labels.append(y)
    return np.concatenate(rows), np.concatenate(labels)


def transform_space(space: FeatureSpace, mapping: Callable[[np.ndarray], np.ndarray],
                    skip: Iterable[int] = ()) -> FeatureSpace:
    """Push every stored mean (except ``skip``) through ``mapping``; radii stay."""
    skip = set(skip)
    protos = space.prototypes
    targets = [p for p in protos if p.class_id not in skip]
    if not targets:
        return FeatureSpace(protos)
    means = np.stack([p.mean for p in targets])
    mapped = np.asarray(mapping(means))
    if mapped.shape != means.shape:
        raise T.ShapeError(f"transform maps {means.shape} to {mapped.shape}")
    new = {p.class_id: replace(p, mean=m.copy(), transform_count=p.transform_count + 1)
           for p, m in zip(targets, mapped)}
    return FeatureSpace(new.get(p.class_id, p) for p in protos)
