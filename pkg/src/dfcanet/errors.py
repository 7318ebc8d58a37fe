"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DataError(ValueError):
    """Manifest, image or split-construction problem (CLI exit code 2)."""


class NumericError(ArithmeticError):
    """Non-finite value where a finite one is required (CLI exit code 3)."""


class CheckpointError(ValueError):
    """Corrupt checkpoint file or incompatible tensor set."""
