"""Learning Koopman invariant subspaces: embedder, losses and training.

The trainable graph is fixed: a linear delay embedder phi maps lag windows of
measurements to x~, the observable network g maps x~ to n observables, and the
reconstructor h maps observables back to measurements. The objective is

    L = ||Y1 - (Y1 Y0^+) Y0||_F^2 + alpha * sum_j ||y_j - h(g(x~_j))||^2 + l1_phi * ||W_phi||_1

where the columns of Y0 / Y1 are g(x~_t) / g(x~_{t+1}) over a batch of pairs.
"""

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ._utils import (
    DivergenceError,
    ShapeError,
    TimeSeries,
    as_episodes,
    check_document,
    read_document,
)
from .linalg import pinv
from .neuralnet import (
    Mlp,
    NetMode,
    OptimizerState,
    backward,
    forward,
    hidden_sizes,
    mlp_from_dict,
    mlp_new,
    mlp_to_dict,
    opt_step,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT = "lkis.model"
MODEL_VERSION = 1


@dataclass
class Embedder:
    """Linear delay embedder x~_t = W_phi [y_t; y_{t-1}; ...; y_{t-k+1}]."""

    W_phi: np.ndarray
    k: int
    r: int

    def __post_init__(self):
        self.W_phi = np.asarray(self.W_phi, dtype=np.float64)
        if self.W_phi.ndim != 2 or self.W_phi.shape[1] != self.k * self.r:
            raise ShapeError(f"W_phi must have shape (p, {self.k * self.r}), got {self.W_phi.shape}")

    @property
    def p(self) -> int:
        return self.W_phi.shape[0]


def embed(e: Embedder, window) -> np.ndarray:
    """Embed one window of k measurements given newest first."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 1 and e.r == 1:
        window = window[:, None]
    if window.shape != (e.k, e.r):
        raise ShapeError(f"window must hold exactly {e.k} vectors of size {e.r}, got shape {window.shape}")
    return e.W_phi @ window.reshape(-1)


def delay_windows(values: np.ndarray, k: int) -> np.ndarray:
    """All lag windows of a (length, r) array, newest sample first.

    Row j is [y_t, y_{t-1}, ..., y_{t-k+1}] flattened, for t = k - 1 + j.
    """
    values = np.asarray(values, dtype=np.float64)
    length, r = values.shape
    if length < k:
        raise ShapeError(f"need at least {k} samples for lag-{k} windows, got {length}")
    windows = np.lib.stride_tricks.sliding_window_view(values, (k, r))[:, 0]
    return np.ascontiguousarray(windows[:, ::-1, :]).reshape(length - k + 1, k * r)


@dataclass(frozen=True)
class PairSet:
    """Consecutive embedded-state pairs (x~_t, x~_{t+1}) with their measurements."""

    windows0: np.ndarray
    windows1: np.ndarray
    targets0: np.ndarray
    targets1: np.ndarray
    episode: np.ndarray
    t: np.ndarray

    def __len__(self):
        return self.windows0.shape[0]

    def take(self, idx) -> "PairSet":
        return PairSet(*(a[idx] for a in (self.windows0, self.windows1, self.targets0,
                                          self.targets1, self.episode, self.t)))


def build_pairs(data: "TimeSeries | Sequence[TimeSeries]", k: int) -> PairSet:
    """Pairs over t = k-1 .. m-1 of every episode; no pair straddles episodes."""
    if k < 1:
        raise ValueError(f"maximum lag k must be at least 1, got {k}")
    parts = []
    for e, ep in enumerate(as_episodes(data)):
        if len(ep) < k + 1:
            raise ShapeError(f"episode {e} has {len(ep)} samples; lag {k} needs at least {k + 1}")
        w = delay_windows(ep.values, k)
        t = np.arange(k - 1, len(ep) - 1)
        parts.append((w[:-1], w[1:], ep.values[k - 1:-1], ep.values[k:], np.full(len(t), e), t))
    return PairSet(*(np.concatenate(cols) for cols in zip(*parts)))


@dataclass
class Hyperparameters:
    k: int = 8
    p: int | None = None
    n: int = 16
    alpha: float = 1.0
    l1_phi: float = 0.0
    depth: int = 1
    hidden: int | None = None

    def __post_init__(self):
        if min(v for v in (self.k, self.n, self.p, self.hidden) if v is not None) < 1:
            raise ValueError(f"k, p, n and hidden must be positive: {self}")
        if self.alpha < 0 or self.l1_phi < 0:
            raise ValueError(f"alpha and l1_phi must be non-negative: {self}")

    def resolved_p(self, r: int) -> int:
        return self.p if self.p is not None else self.k * r


@dataclass
class LkisModel:
    embedder: Embedder
    g: Mlp
    h: Mlp
    alpha: float = 1.0
    l1_phi: float = 0.0
    delta_t: float = 1.0

    def __post_init__(self):
        if self.g.n_in != self.embedder.p:
            raise ShapeError(f"g takes {self.g.n_in} inputs but the embedder produces {self.embedder.p}")
        if self.h.n_in != self.g.n_out or self.h.n_out != self.embedder.r:
            raise ShapeError(f"h must map {self.g.n_out} -> {self.embedder.r}, got {self.h.layer_sizes}")
        if self.alpha < 0 or self.l1_phi < 0:
            raise ValueError("alpha and l1_phi must be non-negative")
        if not self.delta_t > 0:
            raise ValueError(f"delta_t must be positive, got {self.delta_t}")

    @property
    def k(self) -> int:
        return self.embedder.k

    @property
    def r(self) -> int:
        return self.embedder.r

    @property
    def p(self) -> int:
        return self.embedder.p

    @property
    def n(self) -> int:
        return self.g.n_out

    @classmethod
    def new(cls, r: int, hyper: Hyperparameters, delta_t: float = 1.0, seed: int = 0) -> "LkisModel":
        """Fresh model: W_phi starts as a delay-coordinate selector plus small noise."""
        p = hyper.resolved_p(r)
        kr = hyper.k * r
        rng = np.random.default_rng(seed)
        W_phi = 0.01 * rng.normal(size=(p, kr))
        diag = min(p, kr)
        W_phi[np.arange(diag), np.arange(diag)] += 1.0
        g_seed, h_seed = rng.integers(0, 2**31, size=2)
        return cls(
            embedder=Embedder(W_phi=W_phi, k=hyper.k, r=r),
            g=mlp_new(hidden_sizes(p, hyper.n, hyper.depth, hyper.hidden), seed=int(g_seed)),
            h=mlp_new(hidden_sizes(hyper.n, r, hyper.depth, hyper.hidden), seed=int(h_seed)),
            alpha=hyper.alpha,
            l1_phi=hyper.l1_phi,
            delta_t=delta_t,
        )

    def params(self) -> dict[str, np.ndarray]:
        flat = {"phi.W": self.embedder.W_phi}
        flat.update({f"g.{k}": v for k, v in self.g.params.items()})
        flat.update({f"h.{k}": v for k, v in self.h.params.items()})
        return flat

    def set_params(self, flat: dict[str, np.ndarray]) -> None:
        self.embedder.W_phi = flat["phi.W"]
        self.g.params = {k[2:]: v for k, v in flat.items() if k.startswith("g.")}
        self.h.params = {k[2:]: v for k, v in flat.items() if k.startswith("h.")}


def observables(model: LkisModel, windows: np.ndarray, mode: NetMode = NetMode.EVAL) -> np.ndarray:
    """g(phi(window)) for each row of a (batch, k*r) window array."""
    return forward(model.g, windows @ model.embedder.W_phi.T, mode)[0]


def _check_pair(Y0, Y1) -> tuple[np.ndarray, np.ndarray]:
    Y0 = np.asarray(Y0, dtype=np.float64)
    Y1 = np.asarray(Y1, dtype=np.float64)
    if Y0.ndim != 2 or Y0.shape != Y1.shape or Y0.shape[1] < 1:
        raise ShapeError(f"Y0 and Y1 must be matching (n, b) arrays with b >= 1, got {Y0.shape} and {Y1.shape}")
    return Y0, Y1


def _residual(Y0: np.ndarray, Y1: np.ndarray, A: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    if A is None:
        A = Y1 @ pinv(Y0)
    # Y1 (I - Y0^+ Y0), associated so the b x b projector is never formed
    return A, Y1 - A @ Y0


def rss_loss(Y0, Y1) -> float:
    """Residual sum of squares of the least-squares fit Y1 ~ A Y0."""
    Y0, Y1 = _check_pair(Y0, Y1)
    _, R = _residual(Y0, Y1, None)
    return float(np.sum(R * R))


def rss_loss_grad(Y0, Y1, A: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(dL/dY0, dL/dY1) = (-2 A^T R, 2 R) with R = Y1 - A Y0.

    With A = Y1 Y0^+ this is the exact gradient through the projector (the
    derivative of A itself vanishes by the normal equations). Passing a fixed
    A gives the gradient of ||Y1 - A Y0||^2 with A held constant.
    """
    Y0, Y1 = _check_pair(Y0, Y1)
    A, R = _residual(Y0, Y1, A)
    return -2.0 * A.T @ R, 2.0 * R


def rec_loss(model: LkisModel, windows, targets, mode: NetMode = NetMode.EVAL) -> float:
    """Sum over rows of ||y_j - h(g(phi(window_j)))||^2."""
    windows = np.asarray(windows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if windows.shape[0] < 1:
        raise ShapeError("reconstruction loss needs a non-empty batch")
    if targets.shape != (windows.shape[0], model.r):
        raise ShapeError(f"targets must have shape {(windows.shape[0], model.r)}, got {targets.shape}")
    y_hat = forward(model.h, observables(model, windows, mode), mode)[0]
    return float(np.sum((targets - y_hat) ** 2))


@dataclass(frozen=True)
class LossComponents:
    total: float
    rss: float
    rec: float
    l1: float


def total_loss(model: LkisModel, pairs: PairSet, mode: NetMode = NetMode.EVAL) -> LossComponents:
    G = observables(model, np.concatenate([pairs.windows0, pairs.windows1]), mode)
    b = len(pairs)
    rss = rss_loss(G[:b].T, G[b:].T)
    rec = 0.0
    if model.alpha > 0:
        y_hat = forward(model.h, G[:b], mode)[0]
        rec = float(np.sum((pairs.targets0 - y_hat) ** 2))
    l1 = float(np.abs(model.embedder.W_phi).sum())
    return LossComponents(
        total=rss + model.alpha * rec + model.l1_phi * l1, rss=rss, rec=rec, l1=l1,
    )


def loss_and_grads(
    model: LkisModel,
    pairs: PairSet,
    mode: NetMode = NetMode.TRAIN,
    koopman: np.ndarray | None = None,
) -> tuple[LossComponents, dict[str, np.ndarray]]:
    """Total loss of a batch and its gradient for every parameter block.

    Both sides of every pair go through g in one pass so they share batch
    statistics. `koopman`, when given, is used as a constant A in the RSS term.
    """
    b = len(pairs)
    W = model.embedder.W_phi
    windows = np.concatenate([pairs.windows0, pairs.windows1])
    G, g_cache = forward(model.g, windows @ W.T, mode)
    Y0, Y1 = G[:b].T, G[b:].T

    A, R = _residual(Y0, Y1, koopman)
    rss = float(np.sum(R * R))
    dG = np.concatenate([(-2.0 * A.T @ R).T, (2.0 * R).T])

    grads: dict[str, np.ndarray] = {}
    rec = 0.0
    if model.alpha > 0:
        y_hat, h_cache = forward(model.h, G[:b], mode)
        diff = y_hat - pairs.targets0
        rec = float(np.sum(diff * diff))
        h_grads, dG0 = backward(model.h, h_cache, 2.0 * model.alpha * diff)
        dG[:b] += dG0
        grads.update({f"h.{k}": v for k, v in h_grads.items()})
    else:
        grads.update({f"h.{k}": np.zeros_like(v) for k, v in model.h.params.items()})

    g_grads, dX = backward(model.g, g_cache, dG)
    grads.update({f"g.{k}": v for k, v in g_grads.items()})
    grads["phi.W"] = dX.T @ windows + model.l1_phi * np.sign(W)

    l1 = float(np.abs(W).sum())
    return LossComponents(total=rss + model.alpha * rec + model.l1_phi * l1, rss=rss, rec=rec, l1=l1), grads


@dataclass
class TrainConfig:
    batch_size: int = 200
    max_epochs: int = 100
    optimizer: str = "adam"
    lr: float = 1e-3
    validation_fraction: float = 0.0
    patience: int | None = None
    seed: int = 0
    monitor_full_batch: bool = True
    stop_gradient_koopman: bool = False

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size}")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be at least 1, got {self.max_epochs}")


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    batch_rss: float
    batch_rec: float
    full_rss: float | None = None
    val_loss: float | None = None


@dataclass
class LossReport:
    records: list[StepRecord] = field(default_factory=list)
    best_epoch: int | None = None
    threads: str | None = None

    def epoch_records(self) -> list[StepRecord]:
        """The last record of every epoch, which carries the epoch-level losses."""
        return [r for r in self.records if r.full_rss is not None or r.val_loss is not None]

    def full_rss_curve(self) -> np.ndarray:
        return np.array([r.full_rss for r in self.records if r.full_rss is not None])


def _split(pairs: PairSet, fraction: float) -> tuple[PairSet, PairSet | None]:
    n_val = int(round(fraction * len(pairs)))
    if n_val == 0:
        return pairs, None
    return pairs.take(slice(0, len(pairs) - n_val)), pairs.take(slice(len(pairs) - n_val, None))


def train(
    data: "TimeSeries | Sequence[TimeSeries]",
    hyper: Hyperparameters,
    cfg: TrainConfig,
    validation: "TimeSeries | Sequence[TimeSeries] | None" = None,
) -> tuple[LkisModel, LossReport]:
    """Mini-batch training of phi, g and h on the combined objective.

    Batches are sampled uniformly without replacement each epoch; the batch
    RSS uses the batch's own pseudoinverse. The returned model is the snapshot
    with the lowest validation loss (the full training loss when there is no
    validation data).
    """
    episodes = as_episodes(data)
    pairs = build_pairs(episodes, hyper.k)
    if validation is not None:
        val_pairs = build_pairs(validation, hyper.k)
    else:
        pairs, val_pairs = _split(pairs, cfg.validation_fraction)
    if len(pairs) < 2:
        raise ShapeError(f"need at least 2 training pairs for one batch, got {len(pairs)}")

    rng = np.random.default_rng(cfg.seed)
    model = LkisModel.new(episodes[0].r, hyper, delta_t=episodes[0].dt, seed=int(rng.integers(2**31)))
    opt = OptimizerState(kind=cfg.optimizer, lr=cfg.lr)
    report = LossReport(threads=os.environ.get("OMP_NUM_THREADS"))
    batch_size = min(cfg.batch_size, len(pairs))
    best = (np.inf, None)
    stale = 0
    step = 0

    for epoch in range(cfg.max_epochs):
        koopman = None
        if cfg.stop_gradient_koopman:
            G = observables(model, np.concatenate([pairs.windows0, pairs.windows1]))
            koopman = G[len(pairs):].T @ pinv(G[:len(pairs)].T)

        order = rng.permutation(len(pairs))
        starts = list(range(0, len(pairs), batch_size))
        if len(pairs) - starts[-1] < 2:
            starts.pop()
        for i, start in enumerate(starts):
            batch = pairs.take(order[start:start + batch_size])
            loss, grads = loss_and_grads(model, batch, NetMode.TRAIN, koopman)
            if not np.isfinite(loss.total):
                raise DivergenceError(f"loss became non-finite at epoch {epoch}, step {step}", report=report)
            new_params, opt = opt_step(opt, model.params(), grads)
            model.set_params(new_params)

            last = i == len(starts) - 1
            full_rss = val_loss = None
            if last:
                if cfg.monitor_full_batch:
                    full_rss = total_loss(model, pairs).rss
                val_loss = total_loss(model, val_pairs if val_pairs is not None else pairs).total
            report.records.append(StepRecord(step, epoch, loss.rss, loss.rec, full_rss, val_loss))
            step += 1

        if not np.isfinite(val_loss):
            raise DivergenceError(f"validation loss became non-finite at epoch {epoch}", report=report)
        logger.info("epoch %d: batch rss %.4g, rec %.4g, full rss %s, val %.4g",
                    epoch, loss.rss, loss.rec, f"{full_rss:.4g}" if full_rss is not None else "-", val_loss)
        if val_loss < best[0]:
            best = (val_loss, copy.deepcopy(model))
            report.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                logger.info("no validation improvement for %d epochs, stopping", stale)
                break

    return best[1], report


def model_to_dict(model: LkisModel) -> dict[str, Any]:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "k": model.k,
        "r": model.r,
        "W_phi": model.embedder.W_phi.tolist(),
        "alpha": model.alpha,
        "l1_phi": model.l1_phi,
        "delta_t": model.delta_t,
        "g": mlp_to_dict(model.g),
        "h": mlp_to_dict(model.h),
    }


def model_from_dict(doc: dict[str, Any]) -> LkisModel:
    check_document(doc, MODEL_FORMAT, MODEL_VERSION)
    return LkisModel(
        embedder=Embedder(W_phi=np.asarray(doc["W_phi"], dtype=np.float64), k=int(doc["k"]), r=int(doc["r"])),
        g=mlp_from_dict(doc["g"]),
        h=mlp_from_dict(doc["h"]),
        alpha=float(doc["alpha"]),
        l1_phi=float(doc["l1_phi"]),
        delta_t=float(doc["delta_t"]),
    )


def save_model(model: LkisModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path: str | Path) -> LkisModel:
    return model_from_dict(read_document(path, MODEL_FORMAT, MODEL_VERSION))


def report_to_dict(report: LossReport) -> dict[str, Any]:
    return {"best_epoch": report.best_epoch, "threads": report.threads,
            "records": [asdict(r) for r in report.records]}
