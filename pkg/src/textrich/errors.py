"""Exception hierarchy shared across the package."""


class TextRichError(Exception):
    """Base class for all package errors."""


class DimensionError(TextRichError, ValueError):
    """Incompatible tensor shapes or grid geometry."""


class VocabError(TextRichError, ValueError):
    """Token id or byte outside the vocabulary."""


class DegenerateBatchError(TextRichError, ValueError):
    """A loss was requested over zero supervised positions."""


class ContractError(TextRichError, RuntimeError):
    """An operation was called outside its contract."""


class NumericError(TextRichError, FloatingPointError):
    """NaN or Inf appeared where finite values were required."""


class SequenceLengthError(TextRichError, ValueError):
    """A sequence exceeds the configured maximum length."""


class RangeError(TextRichError, ValueError):
    """A value lies outside its admissible interval."""


class EncodingError(TextRichError, ValueError):
    """Text could not be encoded with the vocabulary."""


class TemplateError(TextRichError, KeyError):
    """A prompt template placeholder was left unbound."""


class GenerationError(TextRichError, RuntimeError):
    """Synthetic sample generation failed."""


class ConfigError(TextRichError, ValueError):
    """Invalid configuration."""


class IntegrityError(TextRichError, ValueError):
    """Checkpoint file is corrupt or truncated."""


class CompatibilityError(TextRichError, ValueError):
    """Checkpoint does not match the model it is loaded into."""


class AlignmentError(TextRichError, ValueError):
    """Prediction and ground-truth records do not line up."""


class MetricError(TextRichError, ValueError):
    """Metric undefined for the given inputs."""
