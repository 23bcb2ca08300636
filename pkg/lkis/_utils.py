"""Common types and errors shared across the lkis modules."""

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class LkisError(Exception):
    """Base class for every error raised by lkis."""


class ShapeError(LkisError, ValueError):
    pass


class ConvergenceError(LkisError):
    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


class DegeneracyError(LkisError):
    def __init__(self, message: str, pair: tuple[int, int] | None = None):
        super().__init__(message)
        self.pair = pair


class NonFiniteError(LkisError, FloatingPointError):
    def __init__(self, message: str, where: str | int | None = None):
        super().__init__(message)
        self.where = where


class DivergenceError(LkisError):
    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


class ParseError(LkisError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class ConfigError(LkisError, ValueError):
    pass


class ExperimentError(LkisError):
    def __init__(self, message: str, stage: str, artifacts: Sequence[str] = ()):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.artifacts = list(artifacts)


@dataclass(frozen=True)
class TimeSeries:
    """Uniformly sampled measurements y_t, one row per sample."""

    values: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise ShapeError(f"series values must be a non-empty (length, r) array, got shape {values.shape}")
        if not self.dt > 0:
            raise ValueError(f"sample interval must be positive, got {self.dt}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.values.shape[0]

    @property
    def r(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int | None = None) -> "TimeSeries":
        return TimeSeries(self.values[start:stop], self.dt)


def as_episodes(data: "TimeSeries | Sequence[TimeSeries]") -> list[TimeSeries]:
    """Normalize a series or an episode list to a non-empty list of series."""
    if isinstance(data, TimeSeries):
        return [data]
    episodes = list(data)
    if not episodes:
        raise ShapeError("episode list is empty")
    r = episodes[0].r
    for i, ep in enumerate(episodes):
        if ep.r != r:
            raise ShapeError(f"episode {i} has dimension {ep.r}, expected {r}")
    return episodes


def config_hash(payload: Any) -> str:
    data = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(data.encode()).hexdigest()


def require_finite(array: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(array)):
        raise NonFiniteError(f"non-finite values in {where}", where=where)


def check_document(doc: Any, fmt: str, version: int) -> dict[str, Any]:
    if not isinstance(doc, dict) or doc.get("format") != fmt or doc.get("version") != version:
        raise ConfigError(f"not a {fmt} v{version} document")
    return doc


def read_document(path, fmt: str, version: int) -> dict[str, Any]:
    """Parse a saved JSON document and check its format tag."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not JSON: {e}") from e
    return check_document(doc, fmt, version)
