"""On-disk cache for expensive arrays, keyed by their inputs."""

import hashlib
import io
import json
import logging
import os
from pathlib import Path
from typing import Any, Callable

import lmdb
import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_CACHE_DIR = Path(".cache") / "lkis"


def cache_dir() -> Path:
    return Path(os.environ.get("LKIS_CACHE_DIR", _DEFAULT_CACHE_DIR))


def cache_enabled() -> bool:
    return os.environ.get("LKIS_NO_CACHE", "") in ("", "0")


def _get_cache_env() -> lmdb.Environment:
    path = cache_dir()
    path.mkdir(parents=True, exist_ok=True)
    return lmdb.open(str(path), map_size=1024 * 1024 * 1024)  # 1GB


def _cache_key(namespace: str, payload: Any) -> bytes:
    data = json.dumps({"namespace": namespace, "payload": payload}, sort_keys=True, default=str)
    return hashlib.sha256(data.encode()).hexdigest().encode()


def _dumps(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, array, allow_pickle=False)
    return buf.getvalue()


def _loads(blob: bytes) -> np.ndarray:
    return np.load(io.BytesIO(blob), allow_pickle=False)


def cached_array(namespace: str, payload: Any, compute: Callable[[], np.ndarray]) -> np.ndarray:
    """Return the cached array for (namespace, payload), computing and storing it on a miss."""
    if not cache_enabled():
        return compute()

    key = _cache_key(namespace, payload)
    env = _get_cache_env()
    try:
        with env.begin() as txn:
            cached = txn.get(key)
        if cached is not None:
            logger.debug("cache hit for %s", namespace)
            return _loads(cached)

        logger.debug("cache miss for %s", namespace)
        result = np.asarray(compute())
        with env.begin(write=True) as txn:
            txn.put(key, _dumps(result))
        return result
    finally:
        env.close()
