"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`SDACDError`
so callers (notably the CLI) can map them onto exit codes.
"""


class SDACDError(Exception):
    pass


class ConfigError(SDACDError, ValueError):
    """Invalid configuration value or unsupported combination of options."""


class ShapeError(SDACDError, ValueError):
    pass


class IngestionError(SDACDError, ValueError):
    """Input data on disk or in memory violates the expected layout or range."""


class NumericalError(SDACDError, ArithmeticError):
    pass


class PipelineOrderError(SDACDError, RuntimeError):
    """A pipeline stage was invoked before the values it depends on exist."""


class CheckpointError(SDACDError, RuntimeError):
    pass


class TrainingAbort(SDACDError, RuntimeError):
    def __init__(self, phase, message):
        super().__init__(f"phase {phase}: {message}")
        self.phase = phase
