"""Evaluation metrics: multi-step prediction error, unstable-mode scores and basin maps."""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from sklearn.metrics import roc_auc_score

from .._utils import ShapeError, TimeSeries
from ..dmd import DmdResult, eigenfunction_values, predict_batch, to_continuous
from ..dynamics import SystemKind, SystemSpec, duffing_basin_labels, simulate_states
from ..model import LkisModel, delay_windows, observables
from .cache import cached_array

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE_WINDOW = 5


def _starts(series: TimeSeries, k: int, max_horizon: int) -> int:
    if max_horizon < 1:
        raise ValueError(f"max_horizon must be at least 1, got {max_horizon}")
    if len(series) <= max_horizon + k:
        raise ShapeError(f"series of length {len(series)} is too short for k={k} and horizon {max_horizon}")
    return len(series) - k - max_horizon + 1


def _truth(series: TimeSeries, k: int, n_starts: int, max_horizon: int) -> np.ndarray:
    # start s has its newest sample at t = s + k - 1; horizon h targets t + h
    idx = np.arange(n_starts)[:, None] + k + np.arange(max_horizon)[None, :]
    return series.values[idx]


def forecast_horizons(model: LkisModel, res: DmdResult, series: TimeSeries,
                      max_horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Forecasts and truths, both (starts, max_horizon, r), for every valid start."""
    n_starts = _starts(series, model.k, max_horizon)
    windows = delay_windows(series.values, model.k)[:n_starts]
    return predict_batch(model, res, windows, max_horizon), _truth(series, model.k, n_starts, max_horizon)


def rmse_by_horizon(model: LkisModel, res: DmdResult, series: TimeSeries, max_horizon: int) -> np.ndarray:
    """RMSE of 1..max_horizon step forecasts over all valid starts and observed components."""
    forecast, truth = forecast_horizons(model, res, series, max_horizon)
    return np.sqrt(np.mean((forecast - truth) ** 2, axis=(0, 2)))


def persistence_rmse(series: TimeSeries, max_horizon: int, k: int = 1) -> np.ndarray:
    """RMSE of the forecast y_{t+h} = y_t, on the same starts as a lag-k model."""
    n_starts = _starts(series, k, max_horizon)
    last = series.values[k - 1:k - 1 + n_starts][:, None, :]
    truth = _truth(series, k, n_starts, max_horizon)
    return np.sqrt(np.mean((truth - last) ** 2, axis=(0, 2)))


@dataclass(frozen=True)
class UnstableScores:
    magnitude: np.ndarray
    real: np.ndarray
    mode_index: int
    eigenvalue: complex

    def frame(self, labels: np.ndarray | None = None) -> pd.DataFrame:
        frame = pd.DataFrame({"t": np.arange(len(self.magnitude)), "score": self.magnitude, "score_real": self.real})
        if labels is not None:
            frame["label"] = np.asarray(labels).astype(np.int8)
        return frame


def detect_unstable(model: LkisModel, res: DmdResult, series: TimeSeries) -> UnstableScores:
    """Values of the eigenfunction with the smallest non-zero |lambda| along a series.

    Scores are aligned to t; the first k-1 steps have no full window and are NaN.
    The null cluster of a rank-deficient fit is never picked.
    """
    if res.n < 2:
        raise ShapeError("need at least 2 observables for a non-trivial decaying mode")
    if model.n != res.n:
        raise ShapeError(f"model has {model.n} observables but the DMD result has {res.n}")
    live = res.live
    if live.size == 0:
        raise ShapeError("every DMD eigenvalue is zero; there is no decaying mode to follow")
    i = int(live[np.argmin(np.abs(res.eigenvalues[live]))])
    G = observables(model, delay_windows(series.values, model.k))
    phi = eigenfunction_values(res, G.T)[i]
    pad = np.full(model.k - 1, np.nan)
    return UnstableScores(
        magnitude=np.concatenate([pad, np.abs(phi)]),
        real=np.concatenate([pad, phi.real]),
        mode_index=i,
        eigenvalue=complex(res.eigenvalues[i]),
    )


def widen_labels(labels, tolerance_window: int) -> np.ndarray:
    """Mark t positive when an event occurred at one of t - tolerance_window, ..., t."""
    if tolerance_window < 0:
        raise ValueError(f"tolerance_window must be non-negative, got {tolerance_window}")
    events = np.cumsum(np.asarray(labels, dtype=bool).astype(np.int64))
    before = np.concatenate([np.zeros(tolerance_window + 1, dtype=np.int64), events])[:len(events)]
    return events - before > 0


def auc(scores, labels, tolerance_window: int = DEFAULT_TOLERANCE_WINDOW) -> float:
    """ROC area of scores against event labels; NaN scores are left out."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-D arrays")
    positive = widen_labels(labels, tolerance_window)
    keep = np.isfinite(scores)
    positive, scores = positive[keep], scores[keep]
    if positive.all() or not positive.any():
        raise ValueError("labels are degenerate: need at least one positive and one negative time step")
    return float(roc_auc_score(positive, scores))


def label_amplitude_decays(series: "TimeSeries | np.ndarray", window: int = 50, drop: float = 0.5) -> np.ndarray:
    """Onsets where the rolling peak-to-peak amplitude falls below (1 - drop) of the previous window's."""
    values = series.values if isinstance(series, TimeSeries) else np.asarray(series, dtype=np.float64)
    if values.ndim == 2:
        if values.shape[1] != 1:
            raise ShapeError(f"amplitude labeling needs a scalar series, got {values.shape[1]} components")
        values = values[:, 0]
    if window < 2 or not 0 < drop < 1:
        raise ValueError(f"need window >= 2 and 0 < drop < 1, got {window} and {drop}")
    rolling = pd.Series(values).rolling(window)
    amplitude = (rolling.max() - rolling.min()).to_numpy()
    previous = np.concatenate([np.full(window, np.nan), amplitude[:-window]])
    with np.errstate(invalid="ignore"):
        collapsed = amplitude < (1.0 - drop) * previous
    return collapsed & ~np.concatenate([[False], collapsed[:-1]])


@dataclass(frozen=True)
class BasinMap:
    points: np.ndarray
    values: np.ndarray
    labels: np.ndarray
    attractor_values: tuple[complex, complex]
    mode_index: int
    eigenvalue: complex

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x1": self.points[:, 0], "x2": self.points[:, 1], "re": self.values.real,
                             "im": self.values.imag, "label": self.labels})


def grid_points(n: int, low: float = -2.0, high: float = 2.0) -> np.ndarray:
    axis = np.linspace(low, high, n)
    x1, x2 = np.meshgrid(axis, axis, indexing="xy")
    return np.column_stack([x1.ravel(), x2.ravel()])


def basin_labels(points: np.ndarray, spec: SystemSpec, max_time: float = 200.0) -> np.ndarray:
    return cached_array(
        "duffing_basin_labels",
        {"points": points.tolist(), "spec": spec.to_dict(), "max_time": max_time},
        lambda: duffing_basin_labels(points, spec, max_time),
    )


def _window_values(model: LkisModel, res: DmdResult, spec: SystemSpec, starts: np.ndarray) -> np.ndarray:
    # each start is the oldest sample of a simulated k-step warm-up
    states = simulate_states(spec, starts, model.k)
    obs = states[..., list(spec.observed_components)]
    windows = obs[:, ::-1, :].reshape(len(starts), -1)
    return eigenfunction_values(res, observables(model, windows).T)


def basin_map(model: LkisModel, res: DmdResult, grid_n: int = 40, spec: SystemSpec | None = None,
              low: float = -2.0, high: float = 2.0, candidates: int = 3) -> BasinMap:
    """Eigenfunction values on a grid of initial states, paired with brute-force basin labels.

    Among the `candidates` modes with the smallest continuous-time |lambda|,
    the one that best separates the two attractors (relative to its spread
    over the grid) is used.
    """
    if grid_n < 2:
        raise ValueError(f"grid_n must be at least 2, got {grid_n}")
    spec = spec or SystemSpec.default(SystemKind.DUFFING)
    points = grid_points(grid_n, low, high)
    phi = _window_values(model, res, spec, points)
    at_attractors = _window_values(model, res, spec, np.array([[1.0, 0.0], [-1.0, 0.0]]))

    order = np.argsort(np.abs(to_continuous(res, skip_null=True)))[:candidates]
    separation = np.abs(at_attractors[order, 0] - at_attractors[order, 1]) / (phi[order].std(axis=1) + 1e-300)
    i = int(order[np.argmax(separation)])
    logger.info("basin eigenfunction: mode %d, lambda=%s", i, res.eigenvalues[i])
    return BasinMap(
        points=points,
        values=phi[i],
        labels=basin_labels(points, spec),
        attractor_values=(complex(at_attractors[i, 0]), complex(at_attractors[i, 1])),
        mode_index=i,
        eigenvalue=complex(res.eigenvalues[i]),
    )


@dataclass(frozen=True)
class BasinAgreement:
    agreement: float
    shuffled: float
    n_points: int
    threshold: float


def basin_agreement(bm: BasinMap, margin: float = 0.2, seed: int = 0) -> BasinAgreement:
    """Threshold classification of eigenfunction values against basin labels.

    Values are projected on the direction joining the two attractor values and
    split at their midpoint. Only decided points at least `margin` away from
    every point of the other basin are scored.
    """
    plus, minus = bm.attractor_values
    direction = plus - minus
    if direction == 0:
        raise ValueError("the eigenfunction takes the same value at both attractors")
    direction /= abs(direction)
    projected = (bm.values * np.conj(direction)).real
    threshold = 0.5 * ((plus * np.conj(direction)).real + (minus * np.conj(direction)).real)
    predicted = np.where(projected > threshold, 1, -1)

    decided = bm.labels != 0
    keep = np.zeros(len(bm.labels), dtype=bool)
    for label in (1, -1):
        own, other = decided & (bm.labels == label), decided & (bm.labels == -label)
        if not other.any():
            keep |= own
            continue
        dist, _ = cKDTree(bm.points[other]).query(bm.points[own])
        keep[np.flatnonzero(own)[dist >= margin]] = True
    if not keep.any():
        raise ValueError(f"no decided grid points lie {margin} or more from the basin boundary")

    truth = bm.labels[keep]
    shuffled = np.random.default_rng(seed).permutation(truth)
    return BasinAgreement(
        agreement=float(np.mean(predicted[keep] == truth)),
        shuffled=float(np.mean(predicted[keep] == shuffled)),
        n_points=int(keep.sum()),
        threshold=float(threshold),
    )
