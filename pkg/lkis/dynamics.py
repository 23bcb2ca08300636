"""Benchmark dynamical systems.

Discrete maps are iterated directly; continuous systems are sampled every
`dt` time units with classical RK4 substeps of (about) `substep`. All right-hand
sides accept states with arbitrary leading dimensions, so many initial
conditions integrate together.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd

from ._utils import NonFiniteError, ShapeError, TimeSeries

logger = logging.getLogger(__name__)


class SystemKind(str, enum.Enum):
    FIXED_POINT_MAP = "fixed_point_map"
    FITZHUGH_NAGUMO = "fitzhugh_nagumo"
    DUFFING = "duffing"
    LORENZ = "lorenz"
    ROSSLER = "rossler"
    LINEAR_MAP = "linear_map"


_CONTINUOUS = {SystemKind.FITZHUGH_NAGUMO, SystemKind.DUFFING, SystemKind.LORENZ, SystemKind.ROSSLER}

# (parameters, sample interval, RK4 substep)
_DEFAULTS: dict[SystemKind, tuple[dict[str, float], float, float | None]] = {
    SystemKind.FIXED_POINT_MAP: ({"lam": 0.9, "mu": 0.5}, 1.0, None),
    SystemKind.FITZHUGH_NAGUMO: ({"a": 0.7, "b": 0.8, "c": 0.08, "I": 0.8}, 0.5, 0.01),
    SystemKind.DUFFING: ({"alpha": 1.0, "beta": -1.0, "delta": 0.5}, 0.25, 0.01),
    SystemKind.LORENZ: ({"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}, 0.01, 0.01),
    SystemKind.ROSSLER: ({"a": 0.2, "b": 0.2, "c": 5.7}, 0.05, 0.05),
    SystemKind.LINEAR_MAP: ({}, 1.0, None),
}


@dataclass(frozen=True)
class SystemSpec:
    kind: SystemKind
    params: dict[str, float] = field(default_factory=dict)
    dt: float = 1.0
    substep: float | None = None
    observed: tuple[int, ...] | None = None
    matrix: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SystemKind(self.kind))
        missing = set(_DEFAULTS[self.kind][0]) - set(self.params)
        if missing:
            raise ValueError(f"{self.kind.value} is missing parameters {sorted(missing)}")
        if not self.dt > 0:
            raise ValueError(f"sample interval must be positive, got {self.dt}")
        if self.kind in _CONTINUOUS and not (self.substep and self.substep > 0):
            raise ValueError(f"{self.kind.value} needs a positive RK4 substep")
        if self.kind is SystemKind.LINEAR_MAP:
            if self.matrix is None:
                raise ValueError("linear_map needs a matrix")
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ShapeError(f"linear_map matrix must be square, got {m.shape}")
            object.__setattr__(self, "matrix", m)
        if self.observed is not None:
            object.__setattr__(self, "observed", tuple(int(i) for i in self.observed))
            if any(not 0 <= i < self.dim for i in self.observed):
                raise ShapeError(f"observed components {self.observed} out of range for dimension {self.dim}")

    @classmethod
    def default(cls, kind: "SystemKind | str", **overrides) -> "SystemSpec":
        kind = SystemKind(kind)
        params, dt, substep = _DEFAULTS[kind]
        fields = {"params": dict(params), "dt": dt, "substep": substep}
        fields["params"].update(overrides.pop("params", {}))
        fields.update(overrides)
        return cls(kind=kind, **fields)

    @property
    def dim(self) -> int:
        if self.kind is SystemKind.LINEAR_MAP:
            return self.matrix.shape[0]
        return 3 if self.kind in (SystemKind.LORENZ, SystemKind.ROSSLER) else 2

    @property
    def observed_components(self) -> tuple[int, ...]:
        return self.observed if self.observed is not None else tuple(range(self.dim))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "params": dict(self.params),
            "dt": self.dt,
            "substep": self.substep,
            "observed": list(self.observed_components),
            "matrix": None if self.matrix is None else self.matrix.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SystemSpec":
        d = dict(d)
        if d.get("matrix") is not None:
            d["matrix"] = np.asarray(d["matrix"], dtype=np.float64)
        if d.get("observed") is not None:
            d["observed"] = tuple(d["observed"])
        if "params" not in d or "dt" not in d:
            return cls.default(d.pop("kind"), **d)
        return cls(**d)


def step_fixed_point(x, lam: float, mu: float) -> np.ndarray:
    """(lam x1, mu x2 + (lam^2 - mu) x1^2)."""
    x = np.asarray(x, dtype=np.float64)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([lam * x1, mu * x2 + (lam**2 - mu) * x1**2], axis=-1)


def fitzhugh_nagumo(x: np.ndarray, a: float, b: float, c: float, I: float) -> np.ndarray:
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x1 - x1**3 / 3.0 - x2 + I, c * (x1 + a - b * x2)], axis=-1)


def duffing(x: np.ndarray, alpha: float, beta: float, delta: float) -> np.ndarray:
    pos, vel = x[..., 0], x[..., 1]
    return np.stack([vel, -delta * vel - pos * (beta + alpha * pos**2)], axis=-1)


def lorenz(x: np.ndarray, sigma: float, rho: float, beta: float) -> np.ndarray:
    u, v, w = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([sigma * (v - u), u * (rho - w) - v, u * v - beta * w], axis=-1)


def rossler(x: np.ndarray, a: float, b: float, c: float) -> np.ndarray:
    u, v, w = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([-v - w, u + a * v, b + w * (u - c)], axis=-1)


_RHS: dict[SystemKind, Callable[..., np.ndarray]] = {
    SystemKind.FITZHUGH_NAGUMO: fitzhugh_nagumo,
    SystemKind.DUFFING: duffing,
    SystemKind.LORENZ: lorenz,
    SystemKind.ROSSLER: rossler,
}


def rhs_for(spec: SystemSpec) -> Callable[[np.ndarray], np.ndarray]:
    fn = _RHS[spec.kind]
    return lambda x: fn(x, **spec.params)


def rk4_step(rhs: Callable[[np.ndarray], np.ndarray], x, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step."""
    if not dt > 0:
        raise ValueError(f"step size must be positive, got {dt}")
    x = np.asarray(x, dtype=np.float64)
    k1 = rhs(x)
    k2 = rhs(x + 0.5 * dt * k1)
    k3 = rhs(x + 0.5 * dt * k2)
    k4 = rhs(x + dt * k3)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise NonFiniteError("non-finite derivative in RK4 step")
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _advance(spec: SystemSpec) -> Callable[[np.ndarray], np.ndarray]:
    """The map from one sample to the next."""
    if spec.kind is SystemKind.FIXED_POINT_MAP:
        return lambda x: step_fixed_point(x, **spec.params)
    if spec.kind is SystemKind.LINEAR_MAP:
        return lambda x: x @ spec.matrix.T
    rhs = rhs_for(spec)
    n_sub = max(1, int(round(spec.dt / spec.substep)))
    h = spec.dt / n_sub

    def advance(x):
        for _ in range(n_sub):
            x = rk4_step(rhs, x, h)
        return x

    return advance


def simulate_states(spec: SystemSpec, x0, steps: int, discard: int = 0) -> np.ndarray:
    """Clean states of shape (..., steps, d) for initial states of shape (..., d)."""
    if steps < 1 or discard < 0:
        raise ValueError(f"need steps >= 1 and discard >= 0, got {steps} and {discard}")
    x = np.array(x0, dtype=np.float64)
    if x.shape[-1] != spec.dim:
        raise ShapeError(f"{spec.kind.value} states have dimension {spec.dim}, got {x.shape}")
    advance = _advance(spec)
    out = np.empty(x.shape[:-1] + (steps, spec.dim))
    for i in range(discard + steps):
        if i > 0:
            try:
                x = advance(x)
            except NonFiniteError as e:
                raise NonFiniteError(f"simulation diverged at step {i}", where=i) from e
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"simulation diverged at step {i}", where=i)
        if i >= discard:
            out[..., i - discard, :] = x
    return out


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray
    observations: np.ndarray
    spec: SystemSpec
    x0: tuple[float, ...]
    seed: int | tuple[int, ...]
    noise_sigma: float = 0.0
    discard: int = 0

    @property
    def dt(self) -> float:
        return self.spec.dt

    def __len__(self):
        return self.states.shape[0]

    def to_series(self) -> TimeSeries:
        return TimeSeries(self.observations, self.spec.dt)

    def manifest(self) -> dict[str, Any]:
        seed = list(self.seed) if isinstance(self.seed, tuple) else self.seed
        return {"spec": self.spec.to_dict(), "x0": list(self.x0), "steps": len(self), "seed": seed,
                "noise_sigma": self.noise_sigma, "discard": self.discard}


def _observe(spec: SystemSpec, states: np.ndarray, seed, noise_sigma: float) -> np.ndarray:
    obs = states[..., list(spec.observed_components)].copy()
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        obs += noise_sigma * rng.standard_normal(obs.shape)
    return obs


def simulate(spec: SystemSpec, x0, steps: int, seed: int | Sequence[int] = 0,
             noise_sigma: float = 0.0, discard: int = 0) -> Trajectory:
    """Simulate one trajectory; Gaussian observation noise goes on observed components only."""
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be non-negative, got {noise_sigma}")
    x0 = np.asarray(x0, dtype=np.float64)
    states = simulate_states(spec, x0, steps, discard)
    seed = tuple(seed) if isinstance(seed, (list, tuple)) else seed
    return Trajectory(states=states, observations=_observe(spec, states, seed, noise_sigma), spec=spec,
                      x0=tuple(x0.tolist()), seed=seed, noise_sigma=noise_sigma, discard=discard)


def simulate_episodes(spec: SystemSpec, n_episodes: int, steps: int, seed: int = 0,
                      low: float = -2.0, high: float = 2.0, noise_sigma: float = 0.0,
                      discard: int = 0) -> list[Trajectory]:
    """Episodes from initial states uniform on [low, high]^d.

    Episode i draws its initial state and noise from streams seeded by
    (seed, i), so any subset of episodes can be regenerated on its own.
    """
    x0 = np.stack([np.random.default_rng((seed, i)).uniform(low, high, spec.dim) for i in range(n_episodes)])
    states = simulate_states(spec, x0, steps, discard)
    logger.info("simulated %d %s episodes of %d steps", n_episodes, spec.kind.value, steps)
    return [
        Trajectory(states=states[i], observations=_observe(spec, states[i], (seed, i, 1), noise_sigma),
                   spec=spec, x0=tuple(x0[i].tolist()), seed=(seed, i), noise_sigma=noise_sigma, discard=discard)
        for i in range(n_episodes)
    ]


class BasinLabel(enum.IntEnum):
    MINUS_ONE = -1
    UNDECIDED = 0
    PLUS_ONE = 1


def duffing_basin_labels(points, spec: SystemSpec | None = None, max_time: float = 200.0,
                         step: float = 0.01, tol: float = 1e-3) -> np.ndarray:
    """Brute-force basin labels (+1, -1, or 0 when undecided) for many initial states."""
    spec = spec or SystemSpec.default(SystemKind.DUFFING)
    x = np.array(points, dtype=np.float64).reshape(-1, 2)
    labels = np.zeros(x.shape[0], dtype=np.int8)
    active = np.arange(x.shape[0])
    rhs = rhs_for(spec)
    check_every = 10
    for i in range(int(np.ceil(max_time / step))):
        x[active] = rk4_step(rhs, x[active], step)
        if i % check_every:
            continue
        for target, label in ((1.0, BasinLabel.PLUS_ONE), (-1.0, BasinLabel.MINUS_ONE)):
            done = np.hypot(x[active, 0] - target, x[active, 1]) < tol
            labels[active[done]] = label
            active = active[~done]
        if active.size == 0:
            break
    if active.size:
        logger.info("%d of %d initial states undecided after t=%g", active.size, x.shape[0], max_time)
    return labels


def duffing_basin_label(x0, spec: SystemSpec | None = None, max_time: float = 200.0) -> BasinLabel:
    return BasinLabel(int(duffing_basin_labels([x0], spec, max_time)[0]))


def simulate_amplitude_collapses(steps: int = 5000, period: float = 12.7, n_events: int = 10,
                                 depth: float = 0.1, recovery: float = 40.0, min_gap: int = 200,
                                 noise_sigma: float = 0.01, seed: int = 0) -> tuple[TimeSeries, np.ndarray]:
    """A stable oscillation with sudden amplitude collapses and exponential rebuild.

    `recovery` is the rebuild time constant in samples; the default spans about
    three periods.

    Returns the series and a boolean array marking the collapse onsets.
    """
    rng = np.random.default_rng(seed)
    candidates = np.arange(min_gap, steps - min_gap)
    onsets: list[int] = []
    for t in rng.permutation(candidates):
        if all(abs(t - o) >= min_gap for o in onsets):
            onsets.append(int(t))
        if len(onsets) == n_events:
            break
    onsets.sort()

    t = np.arange(steps)
    amplitude = np.ones(steps)
    for onset in onsets:
        s = t[onset:] - onset
        amplitude[onset:] = np.minimum(amplitude[onset:], 1.0 - (1.0 - depth) * np.exp(-s / recovery))
    y = amplitude * np.sin(2 * np.pi * t / period) + noise_sigma * rng.standard_normal(steps)
    labels = np.zeros(steps, dtype=bool)
    labels[onsets] = True
    return TimeSeries(y), labels


def trajectory_frame(traj: Trajectory, observed_only: bool = True) -> pd.DataFrame:
    values = traj.observations if observed_only else traj.states
    comps = traj.spec.observed_components if observed_only else range(traj.spec.dim)
    frame = pd.DataFrame(values, columns=[f"x{i + 1}" for i in comps])
    frame.insert(0, "t", np.arange(len(traj)) * traj.dt)
    return frame
