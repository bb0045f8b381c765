"""Exception hierarchy. Everything raised on bad data derives from IrlocError."""


class IrlocError(ValueError):
    pass


class SignatureError(IrlocError):
    """Descriptor dtype or dimension does not match what was expected."""


class EmptyInputError(IrlocError):
    pass


class FormatError(IrlocError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} at offset {offset}"
        super().__init__(message)
        self.offset = offset


class NormalizationError(IrlocError):
    pass


class DegenerateError(IrlocError):
    pass


class ConvergenceError(IrlocError):
    def __init__(self, message: str, last_residual: float):
        super().__init__(f"{message} (last residual {last_residual:.6g})")
        self.last_residual = last_residual


class FingerprintMismatchError(IrlocError):
    pass
