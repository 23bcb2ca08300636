from .experiments import ExperimentConfig, ExperimentKind, MetricReport, load_config, load_presets, run
from .io import load_series, read_metadata, write_frame, write_json, write_series, write_trajectory
from .metrics import (
    BasinAgreement,
    BasinMap,
    UnstableScores,
    auc,
    basin_agreement,
    basin_map,
    detect_unstable,
    label_amplitude_decays,
    persistence_rmse,
    rmse_by_horizon,
)
