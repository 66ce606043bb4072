"""Dataset manifests, audio ingestion and the synthetic benchmark."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cache import CacheMiss, feature_cache_read, feature_cache_write
from .container import ContainerError
from .engine import Dataset
from .frontend import AudioError, FrontendConfig, extract_mfcc, normalize_clip, read_wav, write_wav

log = logging.getLogger(__name__)

CACHE_NAME = ".aftcil_features.bin"


class DataError(ValueError):
    """Problems with a dataset, itemised one per line."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("\n".join(problems))


@dataclass
class ManifestEntry:
    clip_id: str
    path: Path
    label: int
    split: str = ""  # "train", "test", or a fold number, or empty


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str]
    root: Path = Path(".")

    def __post_init__(self):
        problems = []
        seen: set[str] = set()
        for e in self.entries:
            if e.clip_id in seen:
                problems.append(f"duplicate clip_id {e.clip_id}")
            seen.add(e.clip_id)
            if not 0 <= e.label < len(self.class_names):
                problems.append(f"clip {e.clip_id}: label {e.label} outside the class vocabulary")
        if len(self.class_names) < 2:
            problems.append(f"need at least 2 classes, found {len(self.class_names)}")
        if problems:
            raise DataError(problems)

    def check_files(self) -> None:
        missing = [f"missing file for clip {e.clip_id}: {e.path}" for e in self.entries if not e.path.is_file()]
        if missing:
            raise DataError(missing)

    def counts(self) -> dict[str, int]:
        out = {name: 0 for name in self.class_names}
        for e in self.entries:
            out[self.class_names[e.label]] += 1
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["clip_id", "path", "label", "class_name", "split"])
            for e in self.entries:
                rel = e.path.relative_to(self.root) if e.path.is_relative_to(self.root) else e.path
                w.writerow([e.clip_id, rel.as_posix(), e.label, self.class_names[e.label], e.split])


def read_manifest(path) -> DatasetManifest:
    """Generic manifest CSV (clip_id, path, label or class_name, optional split)
    or the UrbanSound8K metadata file."""
    path = Path(path)
    root = path.parent
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError([f"{path}: manifest is empty"])
    cols = set(rows[0])
    if {"slice_file_name", "fold", "classID", "class"} <= cols:
        return _urbansound_manifest(rows, root)
    if "path" not in cols or not ({"label", "class_name"} & cols):
        raise DataError([f"{path}: unknown label column; expected 'label' or 'class_name' plus 'path'"])

    if "class_name" in cols:
        pairs = {(int(r["label"]) if r.get("label") not in (None, "") else None, r["class_name"]) for r in rows}
        if all(lbl is not None for lbl, _ in pairs):
            names_by_label = dict(sorted(pairs))
            class_names = [names_by_label[i] for i in range(len(names_by_label))]
        else:
            class_names = sorted({name for _, name in pairs})
        index = {n: i for i, n in enumerate(class_names)}
        labels = [index[r["class_name"]] for r in rows]
    else:
        labels = [int(r["label"]) for r in rows]
        class_names = [str(i) for i in range(max(labels) + 1)]
    entries = [
        ManifestEntry(r.get("clip_id") or Path(r["path"]).stem, (root / r["path"]).resolve(), lbl,
                      r.get("split", "") or "")
        for r, lbl in zip(rows, labels)
    ]
    return DatasetManifest(entries, class_names, root.resolve())


def _urbansound_manifest(rows, root: Path) -> DatasetManifest:
    names: dict[int, str] = {}
    for r in rows:
        names[int(r["classID"])] = r["class"]
    class_names = [names[i] for i in sorted(names)]
    audio_root = root.parent / "audio" if (root.parent / "audio").is_dir() else root
    entries = [
        ManifestEntry(Path(r["slice_file_name"]).stem, (audio_root / f"fold{r['fold']}" / r["slice_file_name"]),
                      int(r["classID"]), r["fold"])
        for r in rows
    ]
    return DatasetManifest(entries, class_names, root.resolve())


def scan_directory(root) -> DatasetManifest:
    """``root/<class_name>/*.wav`` layout."""
    root = Path(root).resolve()
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))
    entries = []
    for label, d in enumerate(class_dirs):
        for wav in sorted(d.glob("*.wav")):
            entries.append(ManifestEntry(f"{d.name}/{wav.stem}", wav, label))
    return DatasetManifest(entries, [d.name for d in class_dirs], root)


def load_manifest(source) -> DatasetManifest:
    source = Path(source)
    if source.is_dir():
        for name in ("manifest.csv", "metadata/UrbanSound8K.csv"):
            if (source / name).is_file():
                return read_manifest(source / name)
        return scan_directory(source)
    return read_manifest(source)


def _extract_one(entry: ManifestEntry, config: FrontendConfig):
    clip = read_wav(entry.path, entry.label, entry.clip_id)
    clip = normalize_clip(clip, config.sample_rate, config.target_seconds)
    return extract_mfcc(clip, config), clip.duration


def ingest(source, config: FrontendConfig = FrontendConfig(), cache_path=None, workers: int = 1,
           use_fold_split: Optional[list[str]] = None) -> tuple[DatasetManifest, Dataset, dict]:
    """Validate a dataset, extract (or load cached) MFCCs and summarise it.

    ``use_fold_split`` names the folds used as the test split; by default
    the split is left to the seeded stratified splitter.
    """
    manifest = load_manifest(source)
    manifest.check_files()
    cache_path = Path(cache_path) if cache_path else manifest.root / CACHE_NAME

    cached: dict = {}
    try:
        cached = feature_cache_read(cache_path, config)
    except CacheMiss as exc:
        log.info("%s", exc)
    except ContainerError as exc:
        log.warning("discarding unreadable cache: %s", exc)

    todo = [e for e in manifest.entries if e.clip_id not in cached]
    problems = []
    if todo:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(lambda e: _safe_extract(e, config), todo))
        for entry, res in zip(todo, results):
            if isinstance(res, str):
                problems.append(res)
            else:
                cached[entry.clip_id] = res
        if problems:
            raise DataError(problems)
        feature_cache_write([cached[e.clip_id] for e in manifest.entries], cache_path, config)

    maps = [cached[e.clip_id] for e in manifest.entries]
    features = np.stack([m.coefficients for m in maps])
    splits = None
    if use_fold_split:
        test_folds = {str(f) for f in use_fold_split}
        splits = ["test" if e.split in test_folds else "train" for e in manifest.entries]
    elif all(e.split in ("train", "test") for e in manifest.entries):
        splits = [e.split for e in manifest.entries]
    data = Dataset(features, np.array([e.label for e in manifest.entries]),
                   [e.clip_id for e in manifest.entries], manifest.class_names, splits)
    summary = {
        "classes": len(manifest.class_names),
        "clips": len(manifest.entries),
        "per_class": manifest.counts(),
        "extracted": len(todo),
        "cache_hits": len(manifest.entries) - len(todo),
        "feature_shape": list(features.shape[1:]),
        "cache": str(cache_path),
    }
    return manifest, data, summary


def _safe_extract(entry: ManifestEntry, config: FrontendConfig):
    try:
        fmap, _ = _extract_one(entry, config)
        return fmap
    except AudioError as exc:
        return f"clip {entry.clip_id}: {exc}"


# -- synthetic benchmark -----------------------------------------------------

@dataclass(frozen=True)
class ClassRecipe:
    name: str
    carrier_band: tuple[float, float]
    am_rate: float  # Hz, 0 for no modulation
    noise_level: float
    burst_rate: float = 0.0  # bursts per second, 0 for continuous
    burst_duty: float = 1.0


DEFAULT_RECIPES = (
    ClassRecipe("hum", (300.0, 380.0), 2.0, 0.05),
    ClassRecipe("chirp", (520.0, 640.0), 0.0, 0.10, 3.0, 0.5),
    ClassRecipe("siren", (820.0, 980.0), 5.0, 0.05),
    ClassRecipe("engine", (1250.0, 1450.0), 3.0, 0.20, 1.0, 0.7),
    ClassRecipe("whistle", (1850.0, 2150.0), 8.0, 0.05),
    ClassRecipe("drill", (2700.0, 3100.0), 4.0, 0.10, 2.0, 0.6),
    ClassRecipe("hammer", (2700.0, 3100.0), 11.0, 0.10, 2.0, 0.6),
    ClassRecipe("bird", (4100.0, 4700.0), 1.0, 0.05),
    ClassRecipe("hiss", (5600.0, 6400.0), 6.0, 0.15),
    ClassRecipe("rain", (7000.0, 7500.0), 3.0, 0.30, 4.0, 0.3),
)
SIMILAR_PAIR = (5, 6)


@dataclass
class SyntheticSpec:
    n_classes: int = 10
    clips_per_class: int = 40
    seconds: float = 3.0
    sample_rate: int = 16000
    seed: int = 0
    recipes: tuple[ClassRecipe, ...] = field(default=DEFAULT_RECIPES)
    similar_pair: tuple[int, int] = SIMILAR_PAIR

    def __post_init__(self):
        if self.n_classes > len(self.recipes):
            raise ValueError(f"only {len(self.recipes)} recipes available for {self.n_classes} classes")
        active = self.recipes[: self.n_classes]
        keys = [(r.carrier_band, r.am_rate, r.noise_level, r.burst_rate, r.burst_duty) for r in active]
        if len(set(keys)) != len(keys):
            raise ValueError("class recipes must be pairwise distinct")
        a, b = self.similar_pair
        if max(a, b) >= self.n_classes:
            raise ValueError("similar pair must refer to active classes")


def recipe_difference(a: ClassRecipe, b: ClassRecipe) -> list[str]:
    """Names of recipe fields in which two classes differ."""
    da, db = asdict(a), asdict(b)
    return [k for k in da if k != "name" and da[k] != db[k]]


def synth_clip(recipe: ClassRecipe, rng: np.random.Generator, seconds: float, rate: int) -> np.ndarray:
    n = int(round(seconds * rate))
    t = np.arange(n) / rate
    f0 = rng.uniform(*recipe.carrier_band)
    x = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    x += 0.3 * np.sin(2 * np.pi * 2 * f0 * t + rng.uniform(0, 2 * np.pi)) if 2 * f0 < rate / 2 else 0.0
    if recipe.am_rate > 0:
        am = recipe.am_rate * rng.uniform(0.9, 1.1)
        x *= 0.5 * (1.0 + np.sin(2 * np.pi * am * t + rng.uniform(0, 2 * np.pi)))
    if recipe.burst_rate > 0:
        phase = (t * recipe.burst_rate + rng.uniform(0, 1)) % 1.0
        x *= phase < recipe.burst_duty
    x = x + recipe.noise_level * rng.standard_normal(n)
    gain = rng.uniform(0.3, 0.7)
    return gain * x / max(np.max(np.abs(x)), 1e-9)


def synth_generate(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write ``n_classes * clips_per_class`` mono 16-bit WAVs plus manifest.csv."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recipes = spec.recipes[: spec.n_classes]
    entries = []
    for label, recipe in enumerate(recipes):
        class_dir = out_dir / recipe.name
        class_dir.mkdir(exist_ok=True)
        for i in range(spec.clips_per_class):
            rng = np.random.default_rng([spec.seed, label, i])
            path = class_dir / f"{recipe.name}_{i:03d}.wav"
            write_wav(path, synth_clip(recipe, rng, spec.seconds, spec.sample_rate), spec.sample_rate)
            entries.append(ManifestEntry(f"{recipe.name}_{i:03d}", path.resolve(), label))
    manifest = DatasetManifest(entries, [r.name for r in recipes], out_dir.resolve())
    manifest.write_csv(out_dir / "manifest.csv")
    return manifest
