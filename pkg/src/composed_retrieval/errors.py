"""Exception hierarchy.

Everything raised on purpose by this package derives from either
:class:`ValidationError` (bad input, config or data; CLI exit code 1) or
:class:`NumericError` (a failure during computation; CLI exit code 2).
"""


class ValidationError(ValueError):
    """Input, configuration or data failed a precondition."""


class NumericError(RuntimeError):
    """A computation produced an unusable result."""


class ShapeError(ValidationError):
    """Operand shapes are incompatible."""


class RankError(ValidationError):
    """A tensor has the wrong number of elements for the operation."""


class DegenerateMaskError(ValidationError):
    """A softmax row has no kept positions."""


class ZeroNormError(NumericError):
    """Normalization of a zero vector was requested."""


class UninitializedGradientError(NumericError):
    """An optimizer step was requested for a parameter without a gradient."""


class EmptyDocumentError(ValidationError):
    """A caption document contains no tokens."""


class SequenceLengthError(ValidationError):
    """A token sequence exceeds the encoder's position table."""


class DegenerateBatchError(ValidationError):
    """A pretraining batch has a sequence with nothing to predict."""


class BatchTooSmallError(ValidationError):
    """A metric-learning batch has no in-batch negatives."""


class DatasetParseError(ValidationError):
    """A dataset file line could not be parsed."""


class ConfigurationError(ValidationError):
    """A configuration value is missing or inconsistent."""


class EmbeddingLookupError(ValidationError, KeyError):
    """An image id is absent from an embedding store."""

    def __str__(self) -> str:
        return ValueError.__str__(self)


class AlignmentError(ValidationError):
    """Score matrices disagree on their query or gallery ids."""
