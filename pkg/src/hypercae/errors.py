"""Exception types shared across the library."""


class ConfigurationError(ValueError):
    """Shapes, dimensions, or configuration values are inconsistent."""


class DataFormatError(ValueError):
    """An image file or dataset manifest is malformed or unsupported."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its placement constraints."""


class NumericDivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""


class ModelIOError(Exception):
    """Base class for model-file problems."""


class ModelFormatError(ModelIOError):
    """The file is not a model file, or its structure cannot be parsed."""


class ModelVersionError(ModelIOError):
    """The model file declares an unsupported format version."""


class ModelChecksumError(ModelIOError):
    """The model file's CRC does not match its contents."""


class ModelTruncatedError(ModelIOError):
    """The model file is shorter than its header declares."""
