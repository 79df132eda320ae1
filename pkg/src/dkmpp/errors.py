"""Exception types shared across the package."""


class DkmppError(Exception):
    """Base class for all errors raised by this package."""


class DataFormatError(DkmppError):
    """Malformed input file (bad row, missing column, non-numeric field)."""


class WindowError(DkmppError):
    """An event or query point lies outside the observation window."""


class GridError(DkmppError):
    """Covariate grid is incomplete, non-finite, or inconsistent."""


class NonFiniteError(DkmppError):
    """A numeric computation produced NaN or infinity."""


class SingularScoreError(DkmppError):
    """The intensity vanished where a log-derivative was required."""


class NonPositiveIntensityError(DkmppError):
    """The intensity is non-positive at an observed event."""


class BoundViolationError(DkmppError):
    """Thinning upper bound exceeded even after retries."""


class MetricError(DkmppError):
    """A metric is undefined for the given inputs (e.g. zero actual count)."""


class ConfigError(DkmppError):
    """Invalid or inconsistent configuration."""


class CheckpointError(DkmppError):
    """Checkpoint file is malformed or structurally incompatible."""
