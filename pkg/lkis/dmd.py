"""Dynamic mode decomposition on any observable source.

A = Y1 Y0^+ is decomposed into eigenvalues lambda_i, modes w_i (right
eigenvectors) and biorthonormal left eigenvectors z_i, so that eigenfunction
values are phi_i = z_i^H g and g(x_{t+1}) = sum_i lambda_i (z_i^H g(x_t)) w_i.
Learned (LKIS), raw-delay (Hankel) and dictionary (extended) observables all
go through the same `dmd_fit`.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
import scipy.linalg

from ._utils import NonFiniteError, ShapeError, TimeSeries, as_episodes, check_document, read_document
from .linalg import ComplexEigenSystem, eig_biorthonormal, pinv
from .model import Embedder, LkisModel, delay_windows, observables
from .neuralnet import NetMode, forward, mlp_new

logger = logging.getLogger(__name__)

DMD_FORMAT = "lkis.dmd"
DMD_VERSION = 1


@dataclass(frozen=True)
class DataMatrices:
    Y0: np.ndarray
    Y1: np.ndarray
    source: str = "raw"

    @property
    def n(self) -> int:
        return self.Y0.shape[0]


@dataclass(frozen=True)
class DmdResult:
    A: np.ndarray
    eigen: ComplexEigenSystem
    delta_t: float
    mode_amplitudes: np.ndarray
    source: str = "raw"

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.eigen.eigenvalues

    @property
    def modes(self) -> np.ndarray:
        return self.eigen.right_vectors

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def live(self) -> np.ndarray:
        """Indices of the eigenvalues outside the null cluster of A."""
        return np.flatnonzero(self.eigen.eigenvalues != 0)


def build_data_matrices(values: "np.ndarray | Sequence[np.ndarray]", source: str = "raw") -> DataMatrices:
    """Shift snapshot columns into (Y0, Y1); episode lists are shifted one by one."""
    blocks = [values] if isinstance(values, np.ndarray) else list(values)
    if not blocks:
        raise ShapeError("no snapshots given")
    Y0, Y1 = [], []
    n = None
    for i, block in enumerate(blocks):
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2:
            raise ShapeError(f"snapshot block {i} must be (n, m+1), got shape {block.shape}")
        if block.shape[1] < 2:
            raise ShapeError(f"snapshot block {i} has {block.shape[1]} snapshot(s); at least 2 are needed")
        n = block.shape[0] if n is None else n
        if block.shape[0] != n:
            raise ShapeError(f"snapshot block {i} has {block.shape[0]} observables, expected {n}")
        Y0.append(block[:, :-1])
        Y1.append(block[:, 1:])
    return DataMatrices(Y0=np.hstack(Y0), Y1=np.hstack(Y1), source=source)


def dmd_fit(dm: DataMatrices, delta_t: float = 1.0, rank_tol: float | None = None) -> DmdResult:
    """Eigensystem of A = Y1 Y0^+.

    When Y0 has fewer independent rows than observables, A keeps n - rank
    numerically zero eigenvalues. They are reported as exact zeros with a
    null-space basis for modes (see `linalg.eig_biorthonormal`).
    """
    if not np.any(dm.Y0):
        raise ShapeError("Y0 is identically zero")
    A = dm.Y1 @ pinv(dm.Y0, rank_tol)
    eigen = eig_biorthonormal(A)
    amplitudes = scipy.linalg.lstsq(eigen.right_vectors, dm.Y0[:, 0].astype(np.complex128))[0]
    logger.debug("DMD on %s: n=%d, m=%d, |lambda| max %.4g, %d null", dm.source, dm.n, dm.Y0.shape[1],
                 np.abs(eigen.eigenvalues).max(), np.count_nonzero(eigen.eigenvalues == 0))
    return DmdResult(A=A, eigen=eigen, delta_t=delta_t, mode_amplitudes=amplitudes, source=dm.source)


def hankel_model(delay: int, r: int, delta_t: float = 1.0) -> LkisModel:
    """Fixed observables of linear Hankel DMD as an LkisModel.

    phi is the identity on the stacked window, g is the identity and h reads
    back the newest sample, so predictions and detection run unchanged.
    """
    if delay < 1:
        raise ValueError(f"delay must be at least 1, got {delay}")
    kr = delay * r
    g = mlp_new((kr, kr))
    g.params["W0"] = np.eye(kr)
    h = mlp_new((kr, r))
    h.params["W0"] = np.eye(r, kr)
    return LkisModel(embedder=Embedder(W_phi=np.eye(kr), k=delay, r=r), g=g, h=h, delta_t=delta_t)


def model_observables(model: LkisModel, data: "TimeSeries | Sequence[TimeSeries]") -> list[np.ndarray]:
    """Observable snapshots (n, length - k + 1) for each episode, Eval mode."""
    blocks = []
    for e, ep in enumerate(as_episodes(data)):
        if ep.r != model.r:
            raise ShapeError(f"episode {e} has dimension {ep.r}, model expects {model.r}")
        blocks.append(observables(model, delay_windows(ep.values, model.k)).T)
    return blocks


def lkis_dmd(model: LkisModel, data: "TimeSeries | Sequence[TimeSeries]", source: str = "lkis") -> DmdResult:
    return dmd_fit(build_data_matrices(model_observables(model, data), source), delta_t=model.delta_t)


def hankel_dmd(data: "TimeSeries | Sequence[TimeSeries]", delay: int) -> DmdResult:
    episodes = as_episodes(data)
    for e, ep in enumerate(episodes):
        if len(ep) < delay + 1:
            raise ShapeError(f"episode {e} has {len(ep)} samples; delay {delay} needs at least {delay + 1}")
    model = hankel_model(delay, episodes[0].r, episodes[0].dt)
    return lkis_dmd(model, episodes, source=f"hankel-{delay}")


@dataclass(frozen=True)
class Dictionary:
    """Named scalar observables of the state; each maps (m, d) states to (m,)."""

    names: tuple[str, ...]
    functions: tuple[Callable[[np.ndarray], np.ndarray], ...]

    def __post_init__(self):
        if not self.names or len(self.names) != len(self.functions):
            raise ValueError("a dictionary needs one name per function and at least one function")

    def __len__(self):
        return len(self.names)

    def __call__(self, states) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        rows = []
        for name, fn in zip(self.names, self.functions):
            row = np.broadcast_to(np.asarray(fn(states), dtype=np.float64), (states.shape[0],))
            bad = np.flatnonzero(~np.isfinite(row))
            if bad.size:
                raise NonFiniteError(
                    f"dictionary function {name!r} is non-finite at state {bad[0]} ({states[bad[0]]})", where=name
                )
            rows.append(row)
        return np.vstack(rows)

    @classmethod
    def from_functions(cls, functions: dict[str, Callable[[np.ndarray], np.ndarray]]) -> "Dictionary":
        return cls(names=tuple(functions), functions=tuple(functions.values()))

    @classmethod
    def monomials(cls, dim: int, degree: int, constant: bool = False) -> "Dictionary":
        """All monomials of the state coordinates up to `degree`, graded order."""
        exps = [e for e in np.ndindex(*([degree + 1] * dim)) if (constant or sum(e) > 0) and sum(e) <= degree]
        exps.sort(key=lambda e: (sum(e), tuple(-x for x in e)))
        names = tuple("*".join(f"x{i + 1}^{p}" if p > 1 else f"x{i + 1}" for i, p in enumerate(e) if p) or "1"
                      for e in exps)
        fns = tuple((lambda s, e=e: np.prod(s ** np.asarray(e), axis=1)) for e in exps)
        return cls(names=names, functions=fns)


FIXED_POINT_DICTIONARY = Dictionary.from_functions({
    "x1": lambda s: s[:, 0],
    "x2": lambda s: s[:, 1],
    "x1^2": lambda s: s[:, 0] ** 2,
})


def extended_dmd(states: "np.ndarray | Sequence[np.ndarray]", dictionary: Dictionary,
                 delta_t: float = 1.0) -> DmdResult:
    """DMD on dictionary values of (m+1, d) state sequences (or a list of them)."""
    blocks = [states] if isinstance(states, np.ndarray) else list(states)
    values = [dictionary(block) for block in blocks]
    return dmd_fit(build_data_matrices(values, source="edmd:" + ",".join(dictionary.names)), delta_t=delta_t)


def eigenfunction_values(res: DmdResult, values) -> np.ndarray:
    """phi_i(x_t) = z_i^H g(x_t) for observable columns g(x_t)."""
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] != res.n:
        raise ShapeError(f"observable values must have {res.n} rows, got shape {values.shape}")
    return res.eigen.left_vectors.conj().T @ values


def _check_model(model: LkisModel, res: DmdResult) -> None:
    if model.n != res.n:
        raise ShapeError(f"model has {model.n} observables but the DMD result has {res.n}")


def predict_batch(model: LkisModel, res: DmdResult, windows: np.ndarray, horizon: int) -> np.ndarray:
    """Forecasts (starts, horizon, r) from newest-first lag windows (starts, k*r)."""
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    _check_model(model, res)
    lam = res.eigen.eigenvalues
    W = res.eigen.right_vectors
    Zh = res.eigen.left_vectors.conj().T

    coeffs = Zh @ observables(model, windows).T.astype(np.complex128)
    out = np.empty((windows.shape[0], horizon, model.r))
    for s in range(horizon):
        coeffs = lam[:, None] * coeffs
        g_hat = (W @ coeffs).real.T
        out[:, s] = forward(model.h, g_hat, NetMode.EVAL)[0]
    return out


def predict(model: LkisModel, res: DmdResult, history, horizon: int) -> np.ndarray:
    """Forecast `horizon` measurements after `history`, its last k samples oldest first."""
    history = np.asarray(history, dtype=np.float64)
    if history.ndim == 1:
        history = history[:, None]
    if history.shape[0] < model.k or history.shape[1] != model.r:
        raise ShapeError(f"history must hold at least {model.k} samples of size {model.r}, got {history.shape}")
    window = history[-model.k:][::-1].reshape(1, -1)
    return predict_batch(model, res, window, horizon)[0]


def to_continuous(res: DmdResult, skip_null: bool = False) -> np.ndarray:
    """ln(lambda)/dt on the principal branch, imaginary parts in (-pi/dt, pi/dt].

    Exact zeros raise unless `skip_null`, in which case they map to -inf.
    """
    if not res.delta_t > 0:
        raise ValueError(f"delta_t must be positive, got {res.delta_t}")
    lam = res.eigen.eigenvalues
    null = lam == 0
    if np.any(null) and not skip_null:
        raise ValueError("a discrete eigenvalue is exactly zero (infinitely fast decay)")
    lam = np.where(lam.imag == 0, lam.real + 0j, lam)
    out = np.full(lam.shape, complex(-np.inf, 0.0))
    out[~null] = np.log(lam[~null]) / res.delta_t
    return out


def eigenvalues_frame(res: DmdResult) -> pd.DataFrame:
    lam = res.eigen.eigenvalues
    return pd.DataFrame({"re": lam.real, "im": lam.imag, "abs": np.abs(lam), "angle": np.angle(lam)})


def _complex_pair(a: np.ndarray) -> dict[str, Any]:
    return {"re": a.real.tolist(), "im": a.imag.tolist()}


def _from_pair(d: dict[str, Any]) -> np.ndarray:
    return np.asarray(d["re"], dtype=np.float64) + 1j * np.asarray(d["im"], dtype=np.float64)


def dmd_to_dict(res: DmdResult) -> dict[str, Any]:
    return {
        "format": DMD_FORMAT,
        "version": DMD_VERSION,
        "source": res.source,
        "delta_t": res.delta_t,
        "A": res.A.tolist(),
        "eigenvalues": _complex_pair(res.eigen.eigenvalues),
        "modes": _complex_pair(res.eigen.right_vectors),
        "left_vectors": _complex_pair(res.eigen.left_vectors),
        "amplitudes": _complex_pair(res.mode_amplitudes),
    }


def dmd_from_dict(doc: dict[str, Any]) -> DmdResult:
    check_document(doc, DMD_FORMAT, DMD_VERSION)
    eigen = ComplexEigenSystem(
        eigenvalues=_from_pair(doc["eigenvalues"]),
        right_vectors=_from_pair(doc["modes"]),
        left_vectors=_from_pair(doc["left_vectors"]),
    )
    A = np.asarray(doc["A"], dtype=np.float64)
    if A.shape != (len(eigen), len(eigen)) or eigen.right_vectors.shape != A.shape:
        raise ShapeError("DMD document has inconsistent shapes")
    return DmdResult(A=A, eigen=eigen, delta_t=float(doc["delta_t"]),
                     mode_amplitudes=_from_pair(doc["amplitudes"]), source=doc["source"])


def save_dmd(res: DmdResult, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dmd_to_dict(res)))


def load_dmd(path: str | Path) -> DmdResult:
    return dmd_from_dict(read_document(path, DMD_FORMAT, DMD_VERSION))
