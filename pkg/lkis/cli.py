"""Command-line entry point: `lkis <command> ...`.

Exit codes: 0 success, 1 a computation failed, 2 invalid configuration or input paths.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from ._utils import ConfigError, LkisError, TimeSeries, as_episodes
from .dmd import eigenvalues_frame, hankel_dmd, hankel_model, lkis_dmd, load_dmd, save_dmd
from .dynamics import SystemKind, SystemSpec, simulate, simulate_episodes
from .harness import experiments, metrics
from .harness.io import load_series, write_frame, write_series, write_trajectory
from .model import Hyperparameters, TrainConfig, load_model, report_to_dict, save_model, train

logger = logging.getLogger(__name__)


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p} does not exist")
    return p


def _key_values(pairs: list[str] | None) -> dict[str, float]:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {pair!r}")
        try:
            out[key] = float(value)
        except ValueError as e:
            raise ConfigError(f"parameter {key} must be a number, got {value!r}") from e
    return out


def _series(args) -> TimeSeries | list[TimeSeries]:
    return load_series(_existing(args.data), args.dt)


def cmd_simulate(args) -> None:
    try:
        spec = SystemSpec.default(args.system, params=_key_values(args.param),
                                  observed=tuple(args.observed) if args.observed else None)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    if args.x0 is not None:
        traj = simulate(spec, args.x0, args.steps, args.seed, args.noise, args.discard)
        path = write_trajectory(args.out, traj)
    else:
        trajs = simulate_episodes(spec, args.episodes, args.steps, args.seed,
                                  noise_sigma=args.noise, discard=args.discard)
        path = write_series(args.out, [t.to_series() for t in trajs],
                            {"spec": spec.to_dict(), "seed": args.seed, "noise_sigma": args.noise})
    print(f"wrote {path}")


def cmd_train(args) -> None:
    data = _series(args)
    try:
        hyper = Hyperparameters(k=args.k, p=args.p, n=args.n, alpha=args.alpha, l1_phi=args.l1, depth=args.depth,
                                hidden=args.hidden)
        cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs, optimizer=args.optimizer, lr=args.lr,
                          validation_fraction=args.val_fraction, patience=args.patience, seed=args.seed,
                          stop_gradient_koopman=args.stop_gradient)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    model, report = train(data, hyper, cfg)
    save_model(model, args.out)
    print(f"wrote {args.out} (best epoch {report.best_epoch})")
    if args.loss:
        write_frame(args.loss, pd.DataFrame(report_to_dict(report)["records"]))
        print(f"wrote {args.loss}")


def cmd_dmd(args) -> None:
    data = as_episodes(_series(args))
    if args.hankel is not None:
        res = hankel_dmd(data, args.hankel)
    else:
        res = lkis_dmd(load_model(_existing(args.model)), data)
    save_dmd(res, args.out)
    print(f"wrote {args.out}")
    frame = eigenvalues_frame(res)
    if args.eigenvalues:
        write_frame(args.eigenvalues, frame, {"dt": res.delta_t, "source": res.source})
        print(f"wrote {args.eigenvalues}")
    print(frame.to_string(index=False))


def _model_and_dmd(args, r: int, dt: float):
    res = load_dmd(_existing(args.dmd))
    if args.hankel is not None:
        return hankel_model(args.hankel, r, dt), res
    if args.model is None:
        raise ConfigError("give --model or --hankel")
    return load_model(_existing(args.model)), res


def cmd_predict(args) -> None:
    series = as_episodes(_series(args))[0]
    model, res = _model_and_dmd(args, series.r, series.dt)
    rmse = metrics.rmse_by_horizon(model, res, series, args.horizon)
    baseline = metrics.persistence_rmse(series, args.horizon, model.k)
    frame = pd.DataFrame({"horizon": np.arange(1, args.horizon + 1), "rmse": rmse, "persistence": baseline})
    if args.out:
        write_frame(args.out, frame)
        print(f"wrote {args.out}")
    print(f"rmse h=1: {rmse[0]:.6g}  h={args.horizon}: {rmse[-1]:.6g}")


def cmd_detect(args) -> None:
    series = as_episodes(_series(args))[0]
    model, res = _model_and_dmd(args, series.r, series.dt)
    scores = metrics.detect_unstable(model, res, series)
    labels = None
    if args.label_window is not None:
        labels = metrics.label_amplitude_decays(series, args.label_window, args.label_drop)
    write_frame(args.out, scores.frame(labels), {"mode_index": scores.mode_index,
                                                 "tolerance_window": args.tolerance_window})
    print(f"wrote {args.out}")
    if labels is not None:
        print(f"auc: {metrics.auc(scores.magnitude, labels, args.tolerance_window):.4f}")


def cmd_basins(args) -> None:
    model = load_model(_existing(args.model))
    res = load_dmd(_existing(args.dmd))
    bm = metrics.basin_map(model, res, args.grid_n, SystemSpec.default(SystemKind.DUFFING))
    write_frame(args.out, bm.frame(), {"mode_index": bm.mode_index})
    agreement = metrics.basin_agreement(bm, args.margin, args.seed)
    print(f"wrote {args.out}")
    print(f"agreement {agreement.agreement:.3f} (shuffled {agreement.shuffled:.3f}) on {agreement.n_points} points")


def cmd_run(args) -> None:
    if args.preset is None and args.config is None:
        raise ConfigError("give --preset, --config or both")
    overrides: dict[str, Any] = {"output_dir": args.output_dir, "seed": args.seed, "data_path": args.data}
    config = experiments.load_config(args.config, args.preset, overrides)
    report = experiments.run(config)
    print(f"wrote {Path(config.output_dir) / 'report.json'}")
    for key, value in report.metrics.items():
        print(f"  {key}: {value:.6g}")


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV series")
    p.add_argument("--dt", type=float, help="sampling interval, overrides the file header")


def _add_fitted(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="model JSON")
    p.add_argument("--hankel", type=int, help="use the linear Hankel model with this delay instead of --model")
    p.add_argument("--dmd", required=True, help="DMD result JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lkis", description="Learning Koopman invariant subspaces")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a benchmark system to CSV")
    p.add_argument("--system", required=True, choices=[k.value for k in SystemKind if k is not SystemKind.LINEAR_MAP])
    p.add_argument("--param", action="append", help="system parameter as key=value")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--x0", type=float, nargs="+")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--observed", type=int, nargs="+")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--discard", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train an LKIS model")
    _add_data(p)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--p", type=int)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--l1", type=float, default=0.0)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--hidden", type=int, help="hidden layer width (default: mean of the layer sizes around it)")
    p.add_argument("--batch-size", type=int, default=200)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--optimizer", default="adam", choices=["sgd", "sgd-momentum", "adam"])
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--val-fraction", type=float, default=0.0)
    p.add_argument("--patience", type=int)
    p.add_argument("--stop-gradient", action="store_true", help="hold the Koopman matrix fixed within each epoch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model JSON")
    p.add_argument("--loss", help="loss curve CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dmd", help="fit DMD on learned or Hankel observables")
    _add_data(p)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model")
    group.add_argument("--hankel", type=int)
    p.add_argument("--out", required=True, help="DMD result JSON")
    p.add_argument("--eigenvalues", help="eigenvalue CSV")
    p.set_defaults(func=cmd_dmd)

    p = sub.add_parser("predict", help="multi-step prediction error on a series")
    _add_data(p)
    _add_fitted(p)
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("detect", help="unstable-mode scores along a series")
    _add_data(p)
    _add_fitted(p)
    p.add_argument("--tolerance-window", type=int, default=metrics.DEFAULT_TOLERANCE_WINDOW)
    p.add_argument("--label-window", type=int, help="label amplitude decays with this rolling window")
    p.add_argument("--label-drop", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("basins", help="Duffing basin map from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--dmd", required=True)
    p.add_argument("--grid-n", type=int, default=40)
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_basins)

    p = sub.add_parser("run", help="run a declared experiment")
    p.add_argument("--preset", choices=sorted(experiments.load_presets()))
    p.add_argument("--config", help="YAML file; its values override the preset")
    p.add_argument("--output-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="CSV series replacing the simulated system")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        logger.error("%s", e)
        return 2
    except LkisError as e:
        logger.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
