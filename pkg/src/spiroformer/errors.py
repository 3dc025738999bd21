"""Exception hierarchy shared by all spiroformer modules.

Every error raised on a bad input path derives from SpiroError so the CLI
can map them to a single machine-parseable line and exit code 3.
"""


class SpiroError(Exception):
    """Base class for all spiroformer errors."""


class ParameterError(SpiroError):
    """A value is outside its documented domain (e.g. sigma <= 0)."""


class ConfigError(SpiroError):
    """A configuration is inconsistent or unsatisfiable."""


class ShapeError(SpiroError):
    """Tensor/array shapes disagree; message names both shapes."""


class DataError(SpiroError):
    """Input data violates a schema or contract."""


class IntegrityError(DataError):
    """A binary container is corrupt or truncated; message carries the offset."""


class MetricError(SpiroError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class NumericsError(SpiroError):
    """Non-finite values appeared where the contract forbids them."""
