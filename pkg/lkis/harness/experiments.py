"""End-to-end experiment recipes.

Each experiment kind runs simulate/load -> train -> fit -> metrics and leaves
plot-ready CSV and JSON files in its output directory, together with a
manifest that is enough to rerun it bit-exactly.
"""

import contextlib
import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd
import yaml

from .. import __version__
from .._utils import ConfigError, DegeneracyError, ExperimentError, LkisError, TimeSeries, as_episodes, config_hash
from ..dmd import (
    FIXED_POINT_DICTIONARY,
    DmdResult,
    dmd_to_dict,
    eigenvalues_frame,
    extended_dmd,
    hankel_dmd,
    hankel_model,
    lkis_dmd,
    to_continuous,
)
from ..dynamics import SystemKind, SystemSpec, simulate, simulate_amplitude_collapses, simulate_episodes
from ..model import Hyperparameters, LkisModel, LossReport, TrainConfig, model_to_dict, train
from . import metrics
from .io import load_series, write_frame, write_json

logger = logging.getLogger(__name__)

PRESETS_PATH = Path(__file__).parent / "presets.yaml"
REPORT_FORMAT = "lkis.report"
REPORT_VERSION = 1
UNIT_CIRCLE_BAND = (0.95, 1.05)


class ExperimentKind(str, enum.Enum):
    EIG_RECOVERY = "eig_recovery"
    LIMIT_CYCLE_SPECTRUM = "limit_cycle_spectrum"
    BASINS = "basins"
    PREDICTION = "prediction"
    DETECTION = "detection"


_DEFAULT_SYSTEM = {
    ExperimentKind.EIG_RECOVERY: SystemKind.FIXED_POINT_MAP,
    ExperimentKind.LIMIT_CYCLE_SPECTRUM: SystemKind.FITZHUGH_NAGUMO,
    ExperimentKind.BASINS: SystemKind.DUFFING,
    ExperimentKind.PREDICTION: SystemKind.LORENZ,
}


@dataclass
class ExperimentConfig:
    kind: ExperimentKind
    output_dir: str = "runs/experiment"
    seed: int = 0
    system: str | None = None
    system_params: dict[str, float] = field(default_factory=dict)
    observed: list[int] | None = None
    x0: list[float] | None = None
    data_path: str | None = None
    dt: float | None = None
    steps: int = 1000
    episodes: int = 1
    discard: int = 0
    noise_sigma: float = 0.0
    splits: list[float] = field(default_factory=lambda: [1.0, 0.0, 0.0])
    hyper: dict[str, Any] = field(default_factory=dict)
    train: dict[str, Any] = field(default_factory=dict)
    horizon: int = 30
    hankel_delays: list[int] = field(default_factory=list)
    tolerance_window: int = metrics.DEFAULT_TOLERANCE_WINDOW
    grid_n: int = 20
    events: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "kind" not in d:
            raise ConfigError("config has no experiment kind")
        try:
            return cls(**{**d, "kind": ExperimentKind(d["kind"])})
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["kind"] = self.kind.value
        return d

    def system_kind(self) -> SystemKind | None:
        if self.system is not None:
            return SystemKind(self.system)
        return _DEFAULT_SYSTEM.get(self.kind)

    def system_spec(self) -> SystemSpec:
        observed = tuple(self.observed) if self.observed is not None else None
        return SystemSpec.default(self.system_kind(), params=self.system_params, observed=observed)

    def hyperparameters(self) -> Hyperparameters:
        return Hyperparameters(**self.hyper)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def validate(self) -> None:
        """Check everything that can be checked before any work is done."""
        if self.data_path is not None and not Path(self.data_path).is_file():
            raise ConfigError(f"data file {self.data_path} does not exist")
        if len(self.splits) != 3 or any(s < 0 for s in self.splits) or sum(self.splits) > 1 + 1e-12:
            raise ConfigError(f"splits must be three non-negative fractions summing to at most 1, got {self.splits}")
        if self.steps < 1 or self.episodes < 1 or self.horizon < 1 or self.grid_n < 2:
            raise ConfigError("steps, episodes and horizon must be positive and grid_n at least 2")
        if any(d < 1 for d in self.hankel_delays):
            raise ConfigError(f"Hankel delays must be positive, got {self.hankel_delays}")
        try:
            system = self.system_kind()
            if system is not None:
                self.system_spec()
            self.hyperparameters()
            self.train_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        if self.data_path is None and system is None and self.kind is not ExperimentKind.DETECTION:
            raise ConfigError(f"{self.kind.value} needs a system or a data_path")
        if self.kind is ExperimentKind.BASINS and system is not SystemKind.DUFFING:
            raise ConfigError("basin maps are defined for the Duffing system only")


def load_presets() -> dict[str, dict[str, Any]]:
    return yaml.safe_load(PRESETS_PATH.read_text())


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Merge a preset, a YAML file and explicit overrides, later ones winning.

    The nested `hyper`, `train`, `system_params` and `events` tables merge key by key.
    """
    layers = []
    if preset is not None:
        presets = load_presets()
        if preset not in presets:
            raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(presets)}")
        layers.append(presets[preset])
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            layers.append(yaml.safe_load(path.read_text()) or {})
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} is not valid YAML: {e}") from e
    layers.append({k: v for k, v in (overrides or {}).items() if v is not None})

    merged: dict[str, Any] = {}
    for layer in layers:
        if not isinstance(layer, dict):
            raise ConfigError("a config must be a mapping")
        for key, value in layer.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
    return ExperimentConfig.from_dict(merged)


@dataclass(frozen=True)
class MetricReport:
    kind: str
    metrics: dict[str, float]
    seed: int
    config_hash: str
    started: str
    finished: str
    artifacts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"format": REPORT_FORMAT, "version": REPORT_VERSION, **dataclasses.asdict(self)}


class _Run:
    """Output directory bookkeeping and stage-level error reporting for one experiment."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.artifacts: list[str] = []

    def write_frame(self, name: str, frame: pd.DataFrame, meta: dict[str, Any] | None = None) -> None:
        write_frame(self.out / name, frame, meta)
        self.artifacts.append(name)

    def write_json(self, name: str, doc: Any) -> None:
        write_json(self.out / name, doc)
        self.artifacts.append(name)

    @contextlib.contextmanager
    def stage(self, name: str):
        logger.info("%s: %s", self.config.kind.value, name)
        try:
            yield
        except (LkisError, ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
            if isinstance(e, ExperimentError):
                raise
            write_json(self.out / "error.json", {"stage": name, "error": str(e), "type": type(e).__name__,
                                                 "artifacts": self.artifacts})
            raise ExperimentError(str(e), stage=name, artifacts=self.artifacts) from e

    def load_data(self) -> list[TimeSeries]:
        cfg = self.config
        if cfg.data_path is not None:
            with self.stage("load"):
                return as_episodes(load_series(cfg.data_path, cfg.dt))
        with self.stage("simulate"):
            spec = cfg.system_spec()
            if cfg.x0 is not None:
                trajs = [simulate(spec, cfg.x0, cfg.steps, cfg.seed, cfg.noise_sigma, cfg.discard)]
            else:
                trajs = simulate_episodes(spec, cfg.episodes, cfg.steps, cfg.seed,
                                          noise_sigma=cfg.noise_sigma, discard=cfg.discard)
            return [t.to_series() for t in trajs]

    def split(self, series: TimeSeries) -> tuple[TimeSeries, TimeSeries | None, TimeSeries | None]:
        n = len(series)
        a = int(round(self.config.splits[0] * n))
        b = a + int(round(self.config.splits[1] * n))
        c = b + int(round(self.config.splits[2] * n))
        parts = [series.slice(0, a), series.slice(a, b) if b > a else None, series.slice(b, c) if c > b else None]
        return parts[0], parts[1], parts[2]

    def train(self, data, validation=None) -> tuple[LkisModel, LossReport]:
        with self.stage("train"):
            model, report = train(data, self.config.hyperparameters(), self.config.train_config(), validation)
        self.write_frame("loss.csv", pd.DataFrame([dataclasses.asdict(r) for r in report.records]))
        self.write_json("model.json", model_to_dict(model))
        return model, report

    def write_eigenvalues(self, name: str, res: DmdResult) -> None:
        frame = eigenvalues_frame(res)
        cont = to_continuous(res, skip_null=True)
        frame["re_c"], frame["im_c"] = cont.real, cont.imag
        self.write_frame(name, frame, {"dt": res.delta_t, "source": res.source})


def _single(episodes: list[TimeSeries]) -> TimeSeries:
    if len(episodes) != 1:
        raise ValueError(f"expected a single series, got {len(episodes)} episodes")
    return episodes[0]


def _eigenvalue_errors(prefix: str, estimated: np.ndarray, truth: list[float]) -> dict[str, float]:
    out = {f"{prefix}_error_{v:g}": float(np.min(np.abs(estimated - v))) for v in truth}
    out[f"{prefix}_max_error"] = max(out.values())
    return out


def _band_count(res: DmdResult) -> int:
    mag = np.abs(res.eigenvalues)
    return int(np.sum((mag >= UNIT_CIRCLE_BAND[0]) & (mag <= UNIT_CIRCLE_BAND[1])))


def _min_live_abs(res: DmdResult) -> float:
    live = np.abs(res.eigenvalues[res.live])
    return float(live.min()) if live.size else float("nan")


def _run_eig_recovery(run: _Run) -> dict[str, float]:
    episodes = run.load_data()
    params = run.config.system_spec().params
    lam, mu = params["lam"], params["mu"]
    with run.stage("fit"):
        edmd = extended_dmd([ep.values for ep in episodes], FIXED_POINT_DICTIONARY, episodes[0].dt)
    run.write_eigenvalues("eigenvalues_edmd.csv", edmd)
    model, report = run.train(episodes)
    with run.stage("fit"):
        res = lkis_dmd(model, episodes)
    run.write_eigenvalues("eigenvalues_lkis.csv", res)
    run.write_json("dmd_lkis.json", dmd_to_dict(res))
    out = {
        **_eigenvalue_errors("edmd", edmd.eigenvalues, [lam, lam**2, mu]),
        **_eigenvalue_errors("lkis", res.eigenvalues, [1.0, lam, lam**2, mu]),
    }
    curve = report.full_rss_curve()
    if curve.size:
        out["final_full_rss"] = float(curve[-1])
    return out


def _run_limit_cycle_spectrum(run: _Run) -> dict[str, float]:
    series = _single(run.load_data())
    model, report = run.train(series)
    delay = run.config.hankel_delays[0] if run.config.hankel_delays else model.k
    with run.stage("fit"):
        res = lkis_dmd(model, series)
        hankel = hankel_dmd(series, delay)
    run.write_eigenvalues("eigenvalues_lkis.csv", res)
    run.write_eigenvalues("eigenvalues_hankel.csv", hankel)
    curve = report.full_rss_curve()
    out = {
        "lkis_near_unit_circle": float(_band_count(res)),
        "lkis_min_abs": _min_live_abs(res),
        "lkis_null": float(res.n - res.live.size),
        "hankel_near_unit_circle": float(_band_count(hankel)),
        "hankel_min_abs": _min_live_abs(hankel),
        "hankel_null": float(hankel.n - hankel.live.size),
        "hankel_delay": float(delay),
    }
    if curve.size:
        q = max(1, curve.size // 4)
        out["full_rss_first"] = float(curve[0])
        out["full_rss_last"] = float(curve[-1])
        out["full_rss_first_quartile"] = float(curve[:q].mean())
        out["full_rss_last_quartile"] = float(curve[-q:].mean())
    return out


def _run_basins(run: _Run) -> dict[str, float]:
    episodes = run.load_data()
    model, _ = run.train(episodes)
    with run.stage("fit"):
        res = lkis_dmd(model, episodes)
    run.write_eigenvalues("eigenvalues_lkis.csv", res)
    run.write_json("dmd_lkis.json", dmd_to_dict(res))
    with run.stage("metrics"):
        bm = metrics.basin_map(model, res, run.config.grid_n, run.config.system_spec())
        agreement = metrics.basin_agreement(bm, seed=run.config.seed)
    run.write_frame("basin.csv", bm.frame(), {"mode_index": bm.mode_index})
    return {
        "max_real_continuous": float(to_continuous(res, skip_null=True).real.max()),
        "basin_agreement": agreement.agreement,
        "basin_agreement_shuffled": agreement.shuffled,
        "basin_points_scored": float(agreement.n_points),
    }


def _select_hankel_delay(delays: list[int], train_part: TimeSeries, val: TimeSeries, horizon: int) -> int:
    best = (np.inf, None)
    failure: DegeneracyError | None = None
    for d in delays:
        try:
            res = hankel_dmd(train_part, d)
        except DegeneracyError as e:
            logger.warning("Hankel delay %d skipped: %s", d, e)
            failure = e
            continue
        err = metrics.rmse_by_horizon(hankel_model(d, train_part.r, train_part.dt), res, val, horizon)[-1]
        logger.info("Hankel delay %d: validation rmse at horizon %d = %.4g", d, horizon, err)
        if best[1] is None or err < best[0]:
            best = (err, d)
    if best[1] is None:
        raise failure
    return best[1]


def _prediction_frame(model: LkisModel, res: DmdResult, test: TimeSeries, horizon: int) -> pd.DataFrame:
    forecast, truth = metrics.forecast_horizons(model, res, test, horizon)
    t = np.arange(forecast.shape[0]) + model.k - 1 + horizon
    return pd.DataFrame({"t": t, "truth": truth[:, -1, 0], "forecast": forecast[:, -1, 0]})


def _run_prediction(run: _Run) -> dict[str, float]:
    H = run.config.horizon
    series = _single(run.load_data())
    train_part, val, test = run.split(series)
    if val is None or test is None:
        raise ExperimentError("prediction needs non-empty validation and test splits", "split", run.artifacts)
    model, _ = run.train(train_part, validation=val)
    delays = run.config.hankel_delays or [model.k]
    with run.stage("fit"):
        res = lkis_dmd(model, train_part)
        delay = _select_hankel_delay(delays, train_part, val, H)
        hres = hankel_dmd(train_part, delay)
        hmodel = hankel_model(delay, series.r, series.dt)
    with run.stage("metrics"):
        curves = {
            "lkis": metrics.rmse_by_horizon(model, res, test, H),
            "hankel": metrics.rmse_by_horizon(hmodel, hres, test, H),
            "persistence": metrics.persistence_rmse(test, H, model.k),
        }
    run.write_frame("rmse.csv", pd.DataFrame({"horizon": np.arange(1, H + 1), **curves}))
    run.write_frame("predictions_lkis.csv", _prediction_frame(model, res, test, H), {"horizon": H})
    run.write_frame("predictions_hankel.csv", _prediction_frame(hmodel, hres, test, H), {"horizon": H})
    out = {"hankel_delay": float(delay)}
    for name, curve in curves.items():
        out[f"rmse_{name}_h1"] = float(curve[0])
        out[f"rmse_{name}_h{H}"] = float(curve[-1])
    return out


def _run_detection(run: _Run) -> dict[str, float]:
    cfg = run.config
    if cfg.data_path is None and cfg.system is None:
        with run.stage("simulate"):
            series, labels = simulate_amplitude_collapses(seed=cfg.seed, **cfg.events)
    else:
        series = _single(run.load_data())
        with run.stage("label"):
            rule = {k: v for k, v in cfg.events.items() if k in ("window", "drop")}
            labels = metrics.label_amplitude_decays(series, **rule)
    train_part, _, _ = run.split(series)
    model, _ = run.train(train_part)
    delay = cfg.hankel_delays[0] if cfg.hankel_delays else model.k
    with run.stage("fit"):
        res = lkis_dmd(model, train_part)
        hres = hankel_dmd(train_part, delay)
    run.write_eigenvalues("eigenvalues_lkis.csv", res)
    with run.stage("metrics"):
        scores = metrics.detect_unstable(model, res, series)
        hscores = metrics.detect_unstable(hankel_model(delay, series.r, series.dt), hres, series)
        w = cfg.tolerance_window
        out = {
            "auc": metrics.auc(scores.magnitude, labels, w),
            "auc_real": metrics.auc(scores.real, labels, w),
            "hankel_auc": metrics.auc(hscores.magnitude, labels, w),
            "n_events": float(np.sum(labels)),
        }
    run.write_frame("scores.csv", scores.frame(labels), {"tolerance_window": w, "mode_index": scores.mode_index})
    return out


_RUNNERS: dict[ExperimentKind, Callable[[_Run], dict[str, float]]] = {
    ExperimentKind.EIG_RECOVERY: _run_eig_recovery,
    ExperimentKind.LIMIT_CYCLE_SPECTRUM: _run_limit_cycle_spectrum,
    ExperimentKind.BASINS: _run_basins,
    ExperimentKind.PREDICTION: _run_prediction,
    ExperimentKind.DETECTION: _run_detection,
}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def run(config: ExperimentConfig) -> MetricReport:
    """Run one experiment end to end and write its artifacts to `config.output_dir`.

    Raises ConfigError before anything is written when the config is invalid,
    and ExperimentError naming the failed stage otherwise.
    """
    config.validate()
    started = _now()
    r = _Run(config)
    r.out.mkdir(parents=True, exist_ok=True)
    # output_dir is not part of a run's identity
    digest = config_hash({k: v for k, v in config.to_dict().items() if k != "output_dir"})
    r.write_json("manifest.json", {
        "config": config.to_dict(),
        "config_hash": digest,
        "seed": config.seed,
        "lkis_version": __version__,
        "numpy_version": np.__version__,
    })

    found = _RUNNERS[config.kind](r)
    bad = sorted(k for k, v in found.items() if not np.isfinite(v))
    if bad:
        raise ExperimentError(f"non-finite metrics: {', '.join(bad)}", stage="metrics", artifacts=r.artifacts)

    report = MetricReport(kind=config.kind.value, metrics=found, seed=config.seed, config_hash=digest,
                          started=started, finished=_now(), artifacts=list(r.artifacts) + ["report.json"])
    r.write_json("report.json", report.to_dict())
    logger.info("%s finished: %s", config.kind.value, ", ".join(f"{k}={v:.4g}" for k, v in found.items()))
    return report
