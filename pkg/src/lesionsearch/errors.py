"""Exception types raised across the package.

Every error deliberately raised by lesionsearch derives from
:class:`LesionSearchError`, so callers (and the CLI) can catch one base
class. Messages name the offending record id / field where one exists.
"""


class LesionSearchError(Exception):
    """Base class for all errors raised by this package."""


# --- record validation -----------------------------------------------------

class ValidationError(LesionSearchError):
    """A record or tensor violates a type invariant."""


class NonFiniteValue(ValidationError):
    """A tensor contains NaN or Inf."""


class ZeroNormFeature(ValidationError):
    """Feature vector has zero L2 norm; cosine similarity undefined."""


class NonBinaryMask(ValidationError):
    """Segmentation mask contains a pixel value other than 0 or 1."""


class ShapeMismatch(ValidationError):
    """Tensor shape disagrees with what the context requires."""


class EmptyId(ValidationError):
    """Record id is empty."""


class InvalidGram(ValidationError):
    """Gram matrix is asymmetric beyond tolerance or has a negative diagonal."""


# --- measures ---------------------------------------------------------------

class DimMismatch(LesionSearchError):
    """Two vectors/masks being compared have different dimensions."""


class OutOfRange(LesionSearchError):
    """A scalar argument lies outside its documented domain."""


class DegenerateRange(LesionSearchError):
    """Range conversion asked to map from a zero-width interval."""


class WeightCountMismatch(LesionSearchError):
    """Layer-weight count differs from the number of Gram layers."""


class ConfigShapeMismatch(LesionSearchError):
    """Gram config disagrees with the feature-map stack it is applied to."""


class MissingComponent(LesionSearchError):
    """A fused score was requested without one of its component scores."""


class UnknownMeasure(LesionSearchError):
    """Measure token does not name one of the supported measures."""


# --- store ------------------------------------------------------------------

class StoreError(LesionSearchError):
    """Base class for persistent store failures."""


class DuplicateId(StoreError):
    """A record with this id already exists in the store."""


class IoFailure(StoreError):
    """Underlying filesystem operation failed."""


class ChecksumMismatch(StoreError):
    """Blob bytes do not match the manifest's length/CRC-32."""


class UnsupportedVersion(StoreError):
    """Manifest declares a format version this build cannot read."""


class MissingBlob(StoreError):
    """Manifest references a blob file that does not exist."""


# --- engine / evaluation ----------------------------------------------------

class EmptyStore(LesionSearchError):
    """Query executed against a store with no candidate records."""


class EmptyQuerySet(LesionSearchError):
    """Evaluation invoked with no query records."""


class LabelsFormatError(LesionSearchError):
    """Relevance-labels CSV is malformed; message carries the line number."""
