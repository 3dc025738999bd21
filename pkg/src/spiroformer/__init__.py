"""spiroformer: spirogram flow-volume modeling toolkit.

Synthetic blow generation, flow-volume preprocessing, a patch transformer
trained with a from-scratch autodiff engine, gradient-boosted fusion with
demographics, baselines, evaluation, and attention-based interpretability.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    IntegrityError,
    MetricError,
    NumericsError,
    ParameterError,
    ShapeError,
    SpiroError,
)

__all__ = [
    "SpiroError",
    "ParameterError",
    "ConfigError",
    "ShapeError",
    "DataError",
    "IntegrityError",
    "MetricError",
    "NumericsError",
    "__version__",
]
