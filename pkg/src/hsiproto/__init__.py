"""Few-shot hyperspectral cube classification with prototypical networks,
channel attention and collective class prototypes."""

from hsiproto.errors import (
    CompatibilityError,
    CubeFormatError,
    HsiError,
    ProtocolError,
    SynthesisError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "CubeFormatError",
    "HsiError",
    "ProtocolError",
    "SynthesisError",
    "TrainingError",
]
