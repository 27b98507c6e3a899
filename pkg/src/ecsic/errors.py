"""Exception types shared across the codec."""


class CorruptStreamError(Exception):
    """Raised when a bitstream fails structural or arithmetic validation.

    Covers bad magic, version mismatch, truncated chunks, and decoder
    desynchronisation detected during entropy decoding.
    """


class ModelMismatchError(Exception):
    """Raised when a bitstream was produced by different model weights.

    The container header carries a hash of the model configuration and
    parameters; decoding with a model whose hash differs would produce
    garbage, so we refuse early.
    """


class DimensionError(ValueError):
    """Shape or divisibility constraint violated."""


class CropError(ValueError):
    """Crop window exceeds the image or leaves nothing behind."""


class ConfigError(ValueError):
    """Unknown or inconsistent configuration values."""


class NumericsError(RuntimeError):
    """Non-finite value encountered where the math guarantees finiteness."""


class RangeError(ValueError):
    """Curves or intervals do not overlap where an overlap is required."""
