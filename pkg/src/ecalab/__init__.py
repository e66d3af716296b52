"""Set regression with attention pooling, joint MSE/PCC training and bound checks."""

from .batch import Batch
from .dgp import DgpConfig, calibrate_eta, generate
from .errors import (
    DegenerateVariance,
    DimMismatch,
    DivergenceDetected,
    EcaError,
    InvalidConfig,
    NonPositiveTemperature,
    NonScalarLoss,
    NumericDomain,
    ShapeMismatch,
    Unreachable,
    ZeroMseGradient,
)
from .model import EcaConfig, ModelParams, forward, predict
from .numerics import EPS, Rng, batch_stats, homogeneity, pcc
from .train import Adam, TrainConfig, TrainingTrace, train

__version__ = "0.1.0"
