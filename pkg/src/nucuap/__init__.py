"""Structured universal adversarial perturbations for video frame sequences.

Nuclear-norm regularized universal attacks (AO-Exp and the LoRa-PGD and
FW-Nucl baselines) against a small differentiable blob detector, with the
IoU / box-ratio / perturbation metrics used to score them.
"""

from nucuap.errors import (
    ConfigError,
    FrameIOError,
    MetricError,
    NumericalError,
    SceneSpecError,
    TensorFormatError,
    UapError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FrameIOError",
    "MetricError",
    "NumericalError",
    "SceneSpecError",
    "TensorFormatError",
    "UapError",
    "__version__",
]
