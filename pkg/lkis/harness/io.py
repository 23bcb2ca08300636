"""CSV series ingestion and export.

Files start with optional `#` metadata lines holding YAML (at least `dt`),
followed by an optional header row and one sample per row. Blank lines or an
`episode` column split a file into episodes; a `t` column is ignored.
"""

import io
import json
import logging
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
import yaml

from .._utils import ParseError, TimeSeries, as_episodes
from ..dynamics import Trajectory, trajectory_frame

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
_SKIP_COLUMNS = ("t",)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def _read_metadata(lines: list[str]) -> tuple[dict[str, Any], int]:
    n = 0
    while n < len(lines) and lines[n].startswith("#"):
        n += 1
    text = "\n".join(line[2:] if line.startswith("# ") else line[1:] for line in lines[:n])
    try:
        meta = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        raise ParseError(f"metadata is not valid YAML: {e}", line=1) from e
    if not isinstance(meta, dict):
        raise ParseError("metadata must be key: value pairs", line=1)
    return meta, n


def read_metadata(path: str | Path) -> dict[str, Any]:
    return _read_metadata(Path(path).read_text().splitlines())[0]


def load_series(path: str | Path, dt: float | None = None) -> "TimeSeries | list[TimeSeries]":
    """Load one series, or a list of episodes when the file holds several.

    An explicit `dt` overrides the one declared in the metadata.
    """
    lines = Path(path).read_text().splitlines()
    meta, n_meta = _read_metadata(lines)
    dt = dt if dt is not None else meta.get("dt")
    if dt is None:
        raise ParseError("no sampling interval: declare `# dt: ...` in the file or pass dt")
    try:
        dt = float(dt)
    except (TypeError, ValueError) as e:
        raise ParseError(f"dt {dt!r} is not a number", line=1) from e

    # (file line number, text) of every non-blank row; breaks hold row indices that start an episode
    rows: list[tuple[int, str]] = []
    breaks: set[int] = set()
    for lineno, line in enumerate(lines[n_meta:], start=n_meta + 1):
        if line.strip():
            rows.append((lineno, line))
        elif rows:
            breaks.add(len(rows))
    if not rows:
        raise ParseError("file holds no samples")

    has_header = not all(_is_number(cell) for cell in rows[0][1].split(","))
    width = len(rows[0][1].split(","))
    for lineno, line in rows:
        if len(line.split(",")) != width:
            raise ParseError(f"expected {width} fields, found {len(line.split(','))}", line=lineno)
    if has_header:
        breaks = {b - 1 for b in breaks if b > 1}
        data_lines = [lineno for lineno, _ in rows[1:]]
    else:
        data_lines = [lineno for lineno, _ in rows]
    if not data_lines:
        raise ParseError("file has a header but no samples", line=rows[0][0])

    body = "\n".join(line for _, line in rows)
    header = 0 if has_header else None
    raw = pd.read_csv(io.StringIO(body), header=header, dtype=str, skipinitialspace=True)
    numeric = raw.apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise ParseError(f"non-numeric cell {raw.iat[i, j]!r} in column {raw.columns[j]!r}", line=data_lines[i])

    frame = pd.read_csv(io.StringIO(body), header=header, float_precision="round_trip", skipinitialspace=True)
    if not has_header:
        frame.columns = [f"x{j + 1}" for j in range(frame.shape[1])]
    frame.columns = [str(c).strip() for c in frame.columns]

    segments = np.zeros(len(frame), dtype=np.int64)
    for b in sorted(breaks):
        segments[b:] += 1
    if "episode" in frame.columns:
        ids = frame.pop("episode").to_numpy()
        changed = np.concatenate([[False], ids[1:] != ids[:-1]])
        segments = segments + np.cumsum(changed)
    frame = frame.drop(columns=[c for c in _SKIP_COLUMNS if c in frame.columns])
    if frame.shape[1] == 0:
        raise ParseError("file has no measurement columns", line=rows[0][0])

    values = frame.to_numpy(dtype=np.float64)
    episodes = [TimeSeries(values[segments == s], dt) for s in np.unique(segments)]
    logger.debug("loaded %s: %d episode(s), r=%d, dt=%g", path, len(episodes), episodes[0].r, dt)
    return episodes[0] if len(episodes) == 1 else episodes


def write_frame(path: str | Path, frame: pd.DataFrame, meta: dict[str, Any] | None = None) -> Path:
    """Write a table as CSV with full float precision, preceded by `#` metadata lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        if meta:
            for line in yaml.safe_dump(meta, sort_keys=False).splitlines():
                f.write(f"# {line}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT)
    return path


def write_series(path: str | Path, data: "TimeSeries | Sequence[TimeSeries]",
                 meta: dict[str, Any] | None = None) -> Path:
    episodes = as_episodes(data)
    frames = []
    for e, ep in enumerate(episodes):
        frame = pd.DataFrame(ep.values, columns=[f"x{j + 1}" for j in range(ep.r)])
        if len(episodes) > 1:
            frame.insert(0, "episode", e)
        frames.append(frame)
    return write_frame(path, pd.concat(frames, ignore_index=True), {"dt": episodes[0].dt, **(meta or {})})


def write_trajectory(path: str | Path, traj: Trajectory) -> Path:
    return write_frame(path, trajectory_frame(traj), {"dt": traj.dt, **traj.manifest()})


def write_json(path: str | Path, doc: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))
    return path
