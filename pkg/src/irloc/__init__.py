"""Descriptor-agnostic place recognition and relocalization for thermal imagery."""

from irloc.errors import (
    ConvergenceError,
    DegenerateError,
    EmptyInputError,
    FingerprintMismatchError,
    FormatError,
    IrlocError,
    NormalizationError,
    SignatureError,
)

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DegenerateError",
    "EmptyInputError",
    "FingerprintMismatchError",
    "FormatError",
    "IrlocError",
    "NormalizationError",
    "SignatureError",
]
