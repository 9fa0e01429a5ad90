# exception hierarchy for the denoising backend

class DenoiseError(Exception):
    """base class for everything the backend raises on purpose"""


class DataError(DenoiseError):
    """input data or files are unusable"""


class ConfigError(DenoiseError, ValueError):
    """parameters are out of range or inconsistent"""


# --- data errors ---

class BadMagic(DataError):
    pass


class TruncatedPayload(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class IoFailure(DataError, OSError):
    pass


class DimMismatch(DataError, ValueError):
    pass


class OutOfBounds(DataError, IndexError):
    pass


class ShapeTooSmall(DataError, ValueError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class NegativeSignal(DataError, ValueError):
    pass


class AllPixelsExcluded(DataError):
    """every pixel of a sample is masked out; the sample carries no loss"""


class RoleMissing(DataError):
    """dataset lacks a role (clean, paired, neighbors) the mode needs"""


class DegenerateData(DataError):
    """too many samples were skipped during training"""


class MissingForwardCache(DataError, RuntimeError):
    pass


# --- config errors ---

class NegativeStd(ConfigError):
    pass


class EvenPatchSize(ConfigError):
    pass


class KTooLarge(ConfigError):
    pass


class IndexOutOfRange(ConfigError, IndexError):
    pass


class CropTooLarge(ConfigError):
    pass


class UsageError(ConfigError):
    """bad command line"""
