"""Exception hierarchy. The CLI maps these onto exit codes."""


class UapError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(UapError, ValueError):
    """Invalid configuration or command-line usage."""


class SceneSpecError(ConfigError):
    """A synthetic scene description violates its invariants."""


class NumericalError(UapError, ArithmeticError):
    """An iterative kernel failed to converge or produced NaN/Inf."""


class FrameIOError(UapError, OSError):
    """Frames could not be read or written."""


class TensorFormatError(FrameIOError):
    """A binary tensor file is malformed (bad magic, version, or truncated)."""


class MetricError(UapError, ValueError):
    """A metric is undefined for the given inputs."""
