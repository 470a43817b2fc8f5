"""Python bindings for the triedit C++ core."""

from ._core import (
    IoError,
    Model,
    TrainingError,
    Triplane,
    ValidationError,
    apply_style,
    composite_weights,
    decode_png,
    encode_png,
    id_t,
    psnr,
    style_ids,
)

__all__ = [
    "IoError",
    "Model",
    "TrainingError",
    "Triplane",
    "ValidationError",
    "apply_style",
    "composite_weights",
    "decode_png",
    "encode_png",
    "id_t",
    "psnr",
    "style_ids",
]
