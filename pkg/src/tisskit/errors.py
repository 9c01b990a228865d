"""Exception hierarchy shared across the package."""


class TissKitError(Exception):
    """Base class for every error raised by this package."""


class ScheduleError(TissKitError):
    """Invalid class schedule or learning-rate schedule arguments."""


class ProtocolError(TissKitError):
    """Dataset split violates the incremental protocol."""


class DataError(TissKitError):
    """Malformed image or mask data."""


class ModelError(TissKitError):
    """Model input, shape, or layer-index mismatch."""


class LossError(TissKitError):
    """Loss inputs are inconsistent or leave nothing to average."""


class ConfigurationError(TissKitError):
    """Run configuration is incomplete or self-contradictory."""


class MetricError(TissKitError):
    """Invalid metric accumulation or an empty class group."""


class EvalError(TissKitError):
    """Checkpoint and dataset disagree about the class space."""


class TrainingError(TissKitError):
    """Training aborted, e.g. on a non-finite loss."""
