"""Exception types shared across the toolkit."""


class RefharmError(Exception):
    """Base class for all toolkit errors."""


class UnsupportedFormatError(RefharmError):
    """Image file is not an 8-bit RGB PNG/PPM (or 8-bit gray for masks)."""


class CorruptHeaderError(RefharmError):
    """Image file header could not be parsed."""


class SchemaError(RefharmError):
    """Manifest JSON violates the expected schema."""


class MissingFileError(RefharmError):
    """A file referenced by a manifest does not exist."""


class ZeroVectorError(RefharmError):
    """Cosine similarity requested against a zero-norm vector."""


class BadMagicError(RefharmError):
    """Feature file does not start with the RAIF magic bytes."""


class VersionMismatchError(RefharmError):
    """Feature file declares an unsupported container version."""


class CorruptPayloadError(RefharmError):
    """Feature file payload is truncated or inconsistent with its header."""


class DimMismatchError(RefharmError):
    """Feature dimensionality disagrees with an existing index."""


class NormalizationError(RefharmError):
    """Stored content vectors drift from unit norm beyond tolerance."""


class ProviderMismatchError(RefharmError):
    """Content features from different providers were mixed in one index."""


class EmptyForegroundError(RefharmError):
    """No patch meets the foreground coverage threshold."""


class ShapeMismatchError(RefharmError):
    """Tensor or image shapes disagree with the operation's contract."""


class GuidanceMisalignedError(RefharmError):
    """Guidance token count cannot be aligned with encoder token count."""


class DegenerateBoxError(RefharmError):
    """Foreground bounding box exceeds every feasible crop window."""


class BackgroundMismatchWarning(UserWarning):
    """Composite and target disagree on background pixels beyond 1/255."""
