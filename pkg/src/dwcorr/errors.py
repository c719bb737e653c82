"""Exception types shared across the package.

Everything derives from DwcorrError so callers can catch the whole family;
the leaf classes distinguish contract violations that tests and the CLI
need to tell apart (exit codes key on these).
"""


class DwcorrError(Exception):
    """Base class for all dwcorr errors."""


class NonFiniteError(DwcorrError, ValueError):
    """Input contains NaN or Inf."""


class EmptyError(DwcorrError, ValueError):
    """Input vector or collection is empty where at least one element is required."""


class LengthMismatchError(DwcorrError, ValueError):
    """Two vectors that must share a length do not."""


class ShapeMismatchError(DwcorrError, ValueError):
    """Tensor shapes are inconsistent with the declared contract."""


class IndexOutOfRangeError(DwcorrError, IndexError):
    """Sample or layer index outside the valid range."""


class LayerMismatchError(DwcorrError, ValueError):
    """Accumulators for different layers (or sizes) cannot be merged."""


class EmptyAccumulatorError(DwcorrError, ValueError):
    """finalize() called on an accumulator with no samples."""


class UnknownTapError(DwcorrError, KeyError):
    """Requested tap name is not defined on the model."""


class UnknownLayerError(DwcorrError, KeyError):
    """Target refers to a site that does not exist in the model."""


class SizeMismatchError(DwcorrError, ValueError):
    """Target length does not match the flattened activation size at its site."""


class NonPositiveVarianceError(DwcorrError, ValueError):
    """Batchnorm running variance must be strictly positive."""


class GroupMismatchError(DwcorrError, ValueError):
    """Group count does not divide the channel count."""


class DivergenceDetectedError(DwcorrError, ArithmeticError):
    """Training loss became non-finite."""


class UnknownKindError(DwcorrError, ValueError):
    """Corruption kind not present in the severity configuration."""


class OutOfRangeInputError(DwcorrError, ValueError):
    """Image values outside the required [0, 1] range."""


class StoreError(DwcorrError):
    """Base class for archive format errors."""


class BadMagicError(StoreError, ValueError):
    """File does not start with the expected magic bytes."""


class VersionUnsupportedError(StoreError, ValueError):
    """Archive was written by a newer format version."""


class TruncatedError(StoreError, ValueError):
    """File is shorter (or longer) than its declared payload sizes."""


class ChecksumMismatchError(StoreError, ValueError):
    """Payload bytes do not match the stored checksum."""


class CountMismatchError(StoreError, ValueError):
    """Image and label files disagree on the sample count."""


class ProvenanceMismatchError(DwcorrError, ValueError):
    """Targets were built for a different model than the one supplied."""


class EmptySuiteError(DwcorrError, ValueError):
    """Evaluation requested with no corruption specs."""


class MissingBaselineError(DwcorrError, KeyError):
    """mCE requested but a (kind, severity) row has no baseline error rate."""
