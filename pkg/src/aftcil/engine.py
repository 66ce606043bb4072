"""Class-incremental training protocol, evaluation and continual-learning metrics."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .aft import AftNetwork, LossWeights, NumericError, loss_fs, loss_kfd, loss_trans, total_loss
from .backbone import (
    BackboneConfig,
    BackboneModel,
    BatchNorm1d,
    ClassifierHead,
    ModelSnapshot,
    classify,
    expand_head,
    snapshot,
)
from .feature_space import FeatureSpace, build_prototypes, extract_features, transform_space
from .frontend import Standardizer
from .optim import Adam

log = logging.getLogger(__name__)

METHODS = ("Finetune", "Joint", "Base", "Base+AFT", "Base+AFT+POS")
_ALIASES = {"aft": "Base+AFT+POS"}


def canonical_method(name: str) -> str:
    key = name.strip().lower()
    if key in _ALIASES:
        return _ALIASES[key]
    for m in METHODS:
        if m.lower() == key:
            return m
    raise ValueError(f"unknown method {name!r}; choose from {', '.join(METHODS + ('AFT',))}")


@dataclass(frozen=True)
class MethodFlags:
    kfd: bool
    trans: bool
    fs: bool
    selective: bool
    joint: bool = False


def method_flags(method: str, selective: Optional[bool] = None) -> MethodFlags:
    method = canonical_method(method)
    table = {
        "Finetune": MethodFlags(False, False, False, False),
        "Joint": MethodFlags(False, False, False, False, joint=True),
        "Base": MethodFlags(True, False, False, False),
        "Base+AFT": MethodFlags(True, True, True, False),
        "Base+AFT+POS": MethodFlags(True, True, True, True),
    }
    flags = table[method]
    if selective is not None:
        flags = MethodFlags(flags.kfd, flags.trans, flags.fs, bool(selective), flags.joint)
    return flags


@dataclass
class RunConfig:
    method: str = "AFT"
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 5.0
    selective: Optional[bool] = None
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    base_classes: int = 5
    classes_per_increment: int = 1
    task_sizes: Optional[list[int]] = None
    class_order: Optional[list[int]] = None
    separate_pair: Optional[list[int]] = None
    test_fraction: float = 0.25
    standardize: bool = True
    samples_per_class: int = 8
    aft_arch: str = "residual"
    aft_hidden: int = 96
    aft_persist: bool = False
    radius_mode: str = "diagonal"
    confidence_threshold: Optional[float] = None
    bn_mode: str = "update"
    dtype: str = "float64"
    record_trajectory: bool = False
    dump_features: bool = False

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        LossWeights(self.alpha, self.beta, self.gamma)
        if self.bn_mode not in ("update", "freeze"):
            raise ValueError(f"bn_mode must be 'update' or 'freeze', got {self.bn_mode!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")

    @property
    def flags(self) -> MethodFlags:
        return method_flags(self.method, self.selective)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


# -- data and tasks ----------------------------------------------------------

@dataclass
class Dataset:
    """Feature maps of a whole corpus held in memory."""

    features: np.ndarray  # [N, n_mfcc, frames]
    labels: np.ndarray  # [N] class ids 0..C-1
    clip_ids: list[str]
    class_names: list[str]
    splits: Optional[list[str]] = None  # "train" / "test" per clip when the corpus fixes a split

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels) or len(self.labels) != len(self.clip_ids):
            raise ValueError("features, labels and clip_ids must have equal length")
        if len(set(self.clip_ids)) != len(self.clip_ids):
            raise ValueError("clip ids must be unique")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass
class Task:
    index: int
    classes: list[int]
    train: np.ndarray
    test: np.ndarray


@dataclass
class TaskSequence:
    tasks: list[Task]
    class_order: list[int]

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def sizes(self) -> list[int]:
        return [len(t.classes) for t in self.tasks]

    def head_index(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.class_order)}


def _task_sizes(n_classes: int, config: RunConfig) -> list[int]:
    if config.task_sizes:
        sizes = list(config.task_sizes)
        if sum(sizes) != n_classes or min(sizes) < 1:
            raise ValueError(f"task_sizes {sizes} must be positive and sum to {n_classes}")
        return sizes
    base, inc = config.base_classes, config.classes_per_increment
    if n_classes < base + 1:
        raise ValueError(f"need at least {base + 1} classes for a {base}-class base task, have {n_classes}")
    if inc < 1:
        raise ValueError("classes_per_increment must be >= 1")
    sizes = [base]
    rest = n_classes - base
    while rest > 0:
        sizes.append(min(inc, rest))
        rest -= inc
    return sizes


def make_task_sequence(labels: Sequence[int], n_classes: int, config: RunConfig,
                       splits: Optional[Sequence[str]] = None) -> TaskSequence:
    """Seeded class order, task partition and per-class stratified split."""
    labels = np.asarray(labels)
    sizes = _task_sizes(n_classes, config)
    seq = np.random.SeedSequence([config.seed, 1])
    order_rng, split_rng = (np.random.default_rng(s) for s in seq.spawn(2))

    if config.class_order is not None:
        order = [int(c) for c in config.class_order]
        if sorted(order) != list(range(n_classes)):
            raise ValueError("class_order must be a permutation of all class ids")
    else:
        order = [int(c) for c in order_rng.permutation(n_classes)]
        if config.separate_pair:
            a, b = config.separate_pair
            bounds = np.cumsum(sizes)
            for _ in range(1000):
                ta = int(np.searchsorted(bounds, order.index(a), side="right"))
                tb = int(np.searchsorted(bounds, order.index(b), side="right"))
                if ta != tb:
                    break
                order = [int(c) for c in order_rng.permutation(n_classes)]
            else:
                raise ValueError(f"cannot place classes {a} and {b} in different tasks")

    train_idx: dict[int, np.ndarray] = {}
    test_idx: dict[int, np.ndarray] = {}
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise ValueError(f"class {c} has no clips")
        if splits is not None:
            tags = np.asarray(splits)[members]
            train_idx[c], test_idx[c] = members[tags == "train"], members[tags == "test"]
        else:
            perm = members[split_rng.permutation(len(members))]
            n_test = max(1, int(round(config.test_fraction * len(members))))
            if n_test >= len(members):
                raise ValueError(f"class {c} has too few clips ({len(members)}) to split")
            test_idx[c], train_idx[c] = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    tasks, start = [], 0
    for i, size in enumerate(sizes):
        classes = order[start:start + size]
        start += size
        tasks.append(Task(i, classes, np.concatenate([train_idx[c] for c in classes]),
                          np.concatenate([test_idx[c] for c in classes])))
        if len(tasks[-1].train) == 0:
            raise ValueError(f"task {i} has no training clips")
    return TaskSequence(tasks, order)


# -- accuracy matrix and metrics ---------------------------------------------

class AccuracyMatrix:
    """Lower-triangular R with R[t][i] = accuracy on task i after task t.

    Rows are appended as tasks finish and never rewritten. A joint run stores
    only the final row.
    """

    def __init__(self, n_tasks: int, final_only: bool = False):
        self.n_tasks = n_tasks
        self.final_only = final_only
        self._rows: list[tuple[float, ...]] = []

    def append_row(self, row: Sequence[float]) -> None:
        expected = self.n_tasks if self.final_only else len(self._rows) + 1
        if self.final_only and self._rows:
            raise ValueError("joint matrix holds a single row")
        if len(row) != expected:
            raise ValueError(f"row {len(self._rows)} needs {expected} entries, got {len(row)}")
        if any(not 0.0 <= v <= 1.0 for v in row):
            raise ValueError(f"accuracies must lie in [0, 1]: {row}")
        self._rows.append(tuple(float(v) for v in row))

    @property
    def rows(self) -> list[tuple[float, ...]]:
        return list(self._rows)

    @property
    def complete(self) -> bool:
        return len(self._rows) == (1 if self.final_only else self.n_tasks)

    def final_row(self) -> tuple[float, ...]:
        if not self.complete:
            raise ValueError("accuracy matrix is incomplete")
        return self._rows[-1]

    def to_array(self) -> np.ndarray:
        out = np.full((len(self._rows), self.n_tasks), np.nan)
        for t, row in enumerate(self._rows):
            out[t, :len(row)] = row
        return out

    def to_csv(self) -> str:
        lines = ["after_task," + ",".join(f"task_{i + 1}" for i in range(self.n_tasks))]
        for t, row in enumerate(self._rows):
            label = "joint" if self.final_only else str(t + 1)
            cells = [repr(v) for v in row] + [""] * (self.n_tasks - len(row))
            lines.append(label + "," + ",".join(cells))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        lines = [ln for ln in text.strip().splitlines() if ln]
        n_tasks = len(lines[0].split(",")) - 1
        final_only = len(lines) > 1 and lines[1].startswith("joint")
        out = cls(n_tasks, final_only)
        for ln in lines[1:]:
            out.append_row([float(c) for c in ln.split(",")[1:] if c != ""])
        return out


def _as_matrix(r) -> np.ndarray:
    if isinstance(r, AccuracyMatrix):
        if r.final_only:
            arr = np.full((r.n_tasks, r.n_tasks), np.nan)
            arr[-1] = r.final_row()
            return arr
        if not r.complete:
            raise ValueError("accuracy matrix is incomplete")
        return r.to_array()
    arr = np.asarray(r, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"accuracy matrix must be square, got shape {arr.shape}")
    return arr


def compute_acc(r) -> float:
    """Mean accuracy over all tasks after the final task."""
    final = _as_matrix(r)[-1]
    if np.isnan(final).any():
        raise ValueError("final row of the accuracy matrix is incomplete")
    return float(final.mean())


def compute_bwt(r) -> float:
    """Average of R[T][i] - R[i][i] over the first T-1 tasks."""
    if isinstance(r, AccuracyMatrix) and r.final_only:
        raise ValueError("backward transfer is undefined for a joint run")
    arr = _as_matrix(r)
    n = arr.shape[0]
    if n < 2:
        raise ValueError("backward transfer needs at least two tasks")
    diag = np.diag(arr)[:-1]
    last = arr[-1, :-1]
    if np.isnan(diag).any() or np.isnan(last).any():
        raise ValueError("accuracy matrix is incomplete")
    return float(np.mean(last - diag))


# -- training state ----------------------------------------------------------

@dataclass
class TrainState:
    model: BackboneModel
    head: Optional[ClassifierHead] = None
    snapshot: Optional[ModelSnapshot] = None
    space: FeatureSpace = field(default_factory=FeatureSpace)
    aft: Optional[AftNetwork] = None
    seen: list[int] = field(default_factory=list)  # head indices learned so far
    task_index: int = -1
    step: int = 0


@dataclass
class RunRngs:
    model: np.random.Generator
    head: np.random.Generator
    aft: np.random.Generator
    shuffle: np.random.Generator
    replay: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RunRngs":
        children = np.random.SeedSequence([seed, 2]).spawn(5)
        return cls(*(np.random.default_rng(c) for c in children))


def _param_digest(state: TrainState) -> str:
    h = hashlib.sha256()
    for p in state.model.parameters() + state.head.parameters():
        h.update(p.data.tobytes())
    return h.hexdigest()


def train_task(state: TrainState, task: Task, x: np.ndarray, y_head: np.ndarray, config: RunConfig,
               rngs: RunRngs, loss_log: Optional[list] = None, digests: Optional[list] = None) -> TrainState:
    """Train on one task, then refresh the feature space and take a snapshot.

    ``x`` holds every clip of the corpus; ``y_head`` are labels in head-index
    space. ``task.train`` selects this task's clips.
    """
    if len(task.train) == 0:
        raise ValueError(f"task {task.index} is empty")
    flags = config.flags
    weights = config.weights
    new_classes = sorted({int(c) for c in y_head[task.train]})
    n_new = len([c for c in new_classes if c not in state.seen])
    if [c for c in new_classes if c not in state.seen] != list(range(len(state.seen), len(state.seen) + n_new)):
        raise ValueError(f"task {task.index}: new classes {new_classes} do not extend the head contiguously")
    if state.head is None:
        state.head = ClassifierHead(state.model.feature_dim, n_new, rngs.head)
    else:
        state.head = expand_head(state.head, n_new, rngs.head)
    state.seen = state.seen + [c for c in new_classes if c not in state.seen]
    state.task_index = task.index

    incremental = state.snapshot is not None
    use_kfd = flags.kfd and incremental
    use_trans = flags.trans and incremental
    use_fs = flags.fs and incremental
    if flags.trans or flags.fs:
        if state.aft is None or not config.aft_persist:
            state.aft = AftNetwork(state.model.feature_dim, config.aft_hidden, config.aft_arch, rng=rngs.aft)

    params = state.model.parameters() + state.head.parameters()
    if use_trans or use_fs:
        params += state.aft.parameters()
    opt = Adam(params, lr=config.learning_rate)
    state.model.train()
    if incremental and config.bn_mode == "freeze":
        _freeze_bn(state.model)

    train_idx = np.asarray(task.train)
    for epoch in range(config.epochs):
        order = train_idx[rngs.shuffle.permutation(len(train_idx))]
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            xb = T.Tensor(x[batch])
            yb = y_head[batch]
            f_t = state.model.forward_features(xb)
            ce = T.softmax_cross_entropy(classify(state.head, f_t), yb)
            kfd = trans = fs = None
            if use_kfd or use_trans:
                f_prev = state.snapshot.features(xb)
                if use_kfd:
                    kfd = loss_kfd(f_t, f_prev)
                if use_trans:
                    trans = loss_trans(f_t, f_prev, state.aft)
            if use_fs:
                fs = loss_fs(state.aft, state.space, state.head, config.samples_per_class, rngs.replay,
                             require_nonempty=True)
            try:
                breakdown = total_loss(ce, kfd, trans, fs, weights)
            except NumericError as exc:
                raise NumericError(f"step {state.step} (task {task.index}, epoch {epoch}): {exc}") from exc
            opt.zero_grad()
            T.backward(breakdown.total_tensor)
            opt.step()
            state.step += 1
            if loss_log is not None:
                loss_log.append({"step": state.step, "task": task.index + 1, "epoch": epoch + 1,
                                 **breakdown.as_row()})
            if digests is not None:
                digests.append(_param_digest(state))

    # end of task: refresh the stored feature space, then freeze the model
    state.model.eval()
    if state.aft is not None and incremental and (use_trans or use_fs):
        state.space = transform_space(state.space, state.aft.apply_numpy)
    protos = build_prototypes(state.model, state.head, x[train_idx], y_head[train_idx], flags.selective,
                              config.radius_mode, task.index, config.confidence_threshold)
    state.space.add(p for p in protos if p.class_id not in state.space)
    state.snapshot = snapshot(state.model, state.head)
    return state


def _freeze_bn(model) -> None:
    """Put every batch-norm layer in inference mode; affine terms stay trainable."""
    stack = [model]
    while stack:
        m = stack.pop()
        for _, child in m._children():
            if isinstance(child, BatchNorm1d):
                child.training = False
            elif hasattr(child, "_children"):
                stack.append(child)


def predict(state: TrainState, x: np.ndarray) -> np.ndarray:
    _, logits = extract_features(state.model, state.head, x)
    return logits.argmax(axis=1)


def evaluate(state: TrainState, tasks: Sequence[Task], x: np.ndarray, y_head: np.ndarray):
    """Per-task accuracy over the full seen-class head, plus the confusion matrix.

    The confusion matrix is indexed [true, predicted] in head-index space.
    """
    n_seen = state.head.num_classes
    accs = []
    conf = np.zeros((n_seen, n_seen), dtype=np.int64)
    for task in tasks:
        if len(task.test) == 0:
            raise ValueError(f"task {task.index} has an empty test split")
        preds = predict(state, x[task.test])
        truth = y_head[task.test]
        accs.append(float(np.mean(preds == truth)))
        np.add.at(conf, (truth, preds), 1)
    return accs, conf


@dataclass
class RunReport:
    config: dict
    class_order: list[int]
    task_classes: list[list[int]]
    matrix: AccuracyMatrix
    acc: float
    bwt: Optional[float]
    loss_log: list[dict]
    confusions: list[np.ndarray]
    space: FeatureSpace
    class_names: list[str]
    digests: list[str] = field(default_factory=list)
    feature_dump: Optional[dict] = None
    state: Optional[TrainState] = None
    standardizer: Optional[Standardizer] = None
    elapsed: float = 0.0

    @property
    def per_task(self) -> list[float]:
        return list(self.matrix.final_row())


def run_method(config: RunConfig, data: Dataset, backbone: BackboneConfig | None = None) -> RunReport:
    """Run the full task sequence for one method and collect its report."""
    started = time.perf_counter()
    seq = make_task_sequence(data.labels, data.n_classes, config, data.splits)
    hidx = seq.head_index()
    y_head = np.array([hidx[int(c)] for c in data.labels], dtype=np.int64)
    x = data.features
    standardizer = None
    if config.standardize:
        standardizer = Standardizer.fit(x[seq.tasks[0].train])
        x = standardizer.apply(x)
    backbone = backbone or BackboneConfig(in_channels=x.shape[1])

    with T.default_dtype(config.dtype):
        x = x.astype(T.get_default_dtype())
        rngs = RunRngs.from_seed(config.seed)
        state = TrainState(BackboneModel(backbone, rngs.model))
        loss_log: list[dict] = []
        digests: list[str] | None = [] if config.record_trajectory else None
        confusions = []
        flags = config.flags
        if flags.joint:
            matrix = AccuracyMatrix(len(seq), final_only=True)
            pooled = Task(0, list(seq.class_order), np.concatenate([t.train for t in seq.tasks]),
                          np.concatenate([t.test for t in seq.tasks]))
            train_task(state, pooled, x, y_head, config, rngs, loss_log, digests)
            accs, conf = evaluate(state, seq.tasks, x, y_head)
            matrix.append_row(accs)
            confusions.append(conf)
        else:
            matrix = AccuracyMatrix(len(seq))
            for t, task in enumerate(seq.tasks):
                train_task(state, task, x, y_head, config, rngs, loss_log, digests)
                accs, conf = evaluate(state, seq.tasks[:t + 1], x, y_head)
                matrix.append_row(accs)
                confusions.append(conf)
                log.info("%s seed %d task %d/%d: %s", config.method, config.seed, t + 1, len(seq),
                         " ".join(f"{a:.3f}" for a in accs))

        dump = None
        if config.dump_features:
            test = np.concatenate([t.test for t in seq.tasks])
            feats, _ = extract_features(state.model, state.head, x[test])
            dump = {"features": feats, "labels": y_head[test], "clip_index": test}

    acc = compute_acc(matrix)
    bwt = None if flags.joint else compute_bwt(matrix)
    return RunReport(
        config=config.to_dict(),
        class_order=seq.class_order,
        task_classes=[t.classes for t in seq.tasks],
        matrix=matrix,
        acc=acc,
        bwt=bwt,
        loss_log=loss_log,
        confusions=confusions,
        space=state.space,
        class_names=list(data.class_names),
        digests=digests or [],
        feature_dump=dump,
        state=state,
        standardizer=standardizer,
        elapsed=time.perf_counter() - started,
    )


def pair_confusion(report: RunReport, pair: Sequence[int]) -> float:
    """Off-diagonal confusion mass between two dataset classes.

    Measured right after the later of the two classes is learned: the rate
    at which each member's test clips are predicted as the other member,
    summed over both directions. Joint runs use their single confusion matrix.
    """
    a, b = (report.class_order.index(int(c)) for c in pair)
    if report.config["method"] == "Joint":
        conf = report.confusions[-1]
    else:
        later = max(a, b)
        bounds = np.cumsum([len(c) for c in report.task_classes])
        task = int(np.searchsorted(bounds, later, side="right"))
        conf = report.confusions[task]
    rate_ab = conf[a, b] / max(conf[a].sum(), 1)
    rate_ba = conf[b, a] / max(conf[b].sum(), 1)
    return float(rate_ab + rate_ba)

