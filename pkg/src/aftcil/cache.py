"""On-disk cache of MFCC feature maps keyed by clip id and front-end config."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable

from .container import Entry, HashMismatch, read_container, read_header, write_container
from .frontend import FeatureMap, FrontendConfig

log = logging.getLogger(__name__)

KIND = "FEAT"


class CacheMiss(LookupError):
    """No usable cache for this configuration."""


def feature_cache_write(maps: Iterable[FeatureMap], path, config: FrontendConfig) -> None:
    entries = [Entry(m.clip_id, m.coefficients, {"label": int(m.label)}) for m in maps]
    write_container(path, KIND, config.config_hash(), entries)


def feature_cache_read(path, config: FrontendConfig) -> dict[str, FeatureMap]:
    """Return clip_id -> FeatureMap, or raise :class:`CacheMiss`.

    Corrupt entries raise :class:`aftcil.container.ChecksumError`.
    """
    path = Path(path)
    if not path.exists():
        raise CacheMiss(f"no cache at {path}")
    try:
        entries = read_container(path, KIND, config.config_hash())
    except HashMismatch as exc:
        log.info("cache miss: %s", exc)
        raise CacheMiss(str(exc)) from exc
    return {e.key: FeatureMap(e.array, e.key, int(e.meta["label"])) for e in entries}


def cache_config_hash(path) -> str:
    return read_header(path)[1]
