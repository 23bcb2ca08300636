__version__ = "0.1.0"

from ._utils import (
    ConfigError,
    ConvergenceError,
    DegeneracyError,
    DivergenceError,
    ExperimentError,
    LkisError,
    NonFiniteError,
    ParseError,
    ShapeError,
    TimeSeries,
)
from .dmd import (
    FIXED_POINT_DICTIONARY,
    Dictionary,
    DmdResult,
    dmd_fit,
    extended_dmd,
    hankel_dmd,
    hankel_model,
    lkis_dmd,
    predict,
    to_continuous,
)
from .dynamics import BasinLabel, SystemKind, SystemSpec, Trajectory, duffing_basin_label, simulate
from .linalg import biorthonormalize, eig_biorthonormal, eig_general, pinv, svd
from .model import Hyperparameters, LkisModel, TrainConfig, load_model, rss_loss, save_model, train
