"""Exception types shared across the toolkit."""


class Crease3dError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(Crease3dError):
    """Bad configuration or bad input data (maps to CLI exit code 1)."""


class InvalidConfig(ValidationError):
    """A configuration value or combination is unusable."""


class NonExactGrid(ValidationError):
    """(roi - patch) is not divisible by the stride; caller must resize first."""


class ShapeMismatch(ValidationError):
    """An array does not have the shape a contract requires."""


class NonFinite(Crease3dError):
    """A NaN/Inf appeared where only finite values are allowed."""


class DegenerateEmbedding(Crease3dError):
    """A zero-norm vector reached an operation that needs a direction."""


class InvalidTarget(ValidationError):
    """Class index outside the classifier's range."""


class InsufficientSubjects(ValidationError):
    """Manifest has fewer subjects than a batch requires."""


class InsufficientSamples(ValidationError):
    """A subject has too few images for the requested gallery/probe split."""


class MissingEmbedding(ValidationError):
    """A split references a sample with no embedding."""


class EmptyScores(ValidationError):
    """Metric computation needs nonempty genuine and impostor sets."""


class CorruptCheckpoint(Crease3dError):
    """Checkpoint failed an integrity or compatibility check."""


class EmptyDataset(ValidationError):
    """Dataset root contains no usable subject/session/image tree."""


class MalformedLayout(ValidationError):
    """Dataset root does not follow the root/subject/session/image layout."""


class IoFailure(Crease3dError):
    """Filesystem write failed while materializing generated data."""
