"""Grading-curve classification of concrete aggregate from images.

The package covers the full pipeline: perspective rectification of
aggregate photographs to a constant ground sampling distance, a small
fully convolutional network with multi-scale encoder modules (plus its
single-dilation ablation twin), seeded augmentation, a from-scratch
training loop with Adam and early stopping, and the evaluation metrics.
A synthetic scene generator makes the whole chain testable without the
real dataset. `aggnet.cli` binds everything into commands.
"""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DataError, DivergenceError
from .model import (AggNetConfig, CANONICAL_NINE, GradingCurveLabel,
                    aggnet_forward, init_params, param_count, predict_class,
                    receptive_field)

__all__ = [
    "AggNetConfig",
    "CANONICAL_NINE",
    "ConfigError",
    "ContractError",
    "DataError",
    "DivergenceError",
    "GradingCurveLabel",
    "aggnet_forward",
    "init_params",
    "param_count",
    "predict_class",
    "receptive_field",
    "__version__",
]
