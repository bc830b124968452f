"""Exception types shared across the package."""


class EmbAdaptError(Exception):
    """Base class for all embadapt errors."""


class DataError(EmbAdaptError):
    """Invalid dataset contents (duplicate ids, bad grades, bad splits)."""


class FormatError(EmbAdaptError):
    """Malformed or incompatible file contents."""


class TagMismatchError(EmbAdaptError):
    """Encoder tag of a model does not match the embedding table."""


class FetchError(EmbAdaptError):
    """Remote embedding endpoint failed after exhausting retries."""


class TrainingDivergedError(EmbAdaptError):
    """A loss term became NaN or infinite during training."""
