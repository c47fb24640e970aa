"""Generative color grading with 3D LUTs.

The package covers the LUT engine and file formats, a vector-quantized LUT
tokenizer, color metrics and rewards, LUT-library fusion, and a small token
policy trained by likelihood and then by group-relative policy optimization.
"""

from .errors import FormatError, InputError, LutgenError, NumericError
from .lut import Lut3d, apply_lut, compose_lut, identity_lut, resample_lut

__all__ = [
    "FormatError",
    "InputError",
    "Lut3d",
    "LutgenError",
    "NumericError",
    "apply_lut",
    "compose_lut",
    "identity_lut",
    "resample_lut",
]
__version__ = "0.1.0"
