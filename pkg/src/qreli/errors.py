"""Exception and warning types shared across the package."""


class QreliError(Exception):
    """Base class for all qreli validation and data errors."""


class BundleFormatError(QreliError):
    """Base class for tensor-bundle file format violations."""


class BadMagicError(BundleFormatError):
    """File does not start with the QRB1 magic."""


class TruncatedPayloadError(BundleFormatError):
    """Payload shorter than the manifest promises."""


class ManifestError(BundleFormatError):
    """Manifest is not valid JSON or is structurally malformed."""


class ShapeMismatchError(BundleFormatError):
    """Manifest byte length disagrees with dtype size times shape product."""


class NonFiniteError(QreliError):
    """NaN or infinity in a tensor that must be finite."""


class ZeroRowError(QreliError):
    """Row with zero L2 norm cannot be normalized."""


class DimensionMismatchError(QreliError):
    """Tensor dimensions are incompatible for the requested operation."""


class NoLabeledRowsError(QreliError):
    """Operation requires labeled samples but none are present."""


class LengthMismatchError(QreliError):
    """Paired inputs must describe the same samples in the same order."""


class EmptySideError(QreliError):
    """ID or OOD score array is empty."""


class MissingNegativesError(QreliError):
    """Negative-text embeddings required by the scorer were not supplied."""


class MixedScaleError(QreliError):
    """One accuracy looks like a fraction and the other like a percentage."""


class GridMismatchError(QreliError):
    """Feature-map token count or spectrum shape disagrees with the grid."""


class NumericalDivergenceError(QreliError):
    """Non-finite value appeared during training or a forward pass."""


class HeaderMismatchError(QreliError):
    """CSV inputs to the report builder have incompatible columns."""


class DegenerateRangeWarning(UserWarning):
    """Calibration range collapsed to a point; scale was forced to 1.0."""
