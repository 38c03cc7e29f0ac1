"""crease3d: forehead-crease verification via patch-cube 3D embeddings.

Pipeline: ROI image -> overlapping-patch montage cube -> 3D inception-style
backbone (1024-d) -> two-FC head (512-d, unit norm) -> cosine scoring under
a gallery/probe protocol.  Training is two-stage: online-mined triplet loss
for the backbone, then ArcFace on the frozen backbone's features.
"""

from . import cli, datakit, evaluation, losses, montage, netspec, network, training
from .errors import (
    CorruptCheckpoint,
    Crease3dError,
    DegenerateEmbedding,
    EmptyDataset,
    EmptyScores,
    InsufficientSamples,
    InsufficientSubjects,
    InvalidConfig,
    InvalidTarget,
    IoFailure,
    MalformedLayout,
    MissingEmbedding,
    NonExactGrid,
    NonFinite,
    ShapeMismatch,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "cli", "datakit", "evaluation", "losses", "montage", "netspec",
    "network", "training",
    "Crease3dError", "ValidationError", "InvalidConfig", "NonExactGrid",
    "ShapeMismatch", "InvalidTarget", "InsufficientSubjects",
    "InsufficientSamples", "MissingEmbedding", "EmptyScores", "EmptyDataset",
    "MalformedLayout", "NonFinite", "DegenerateEmbedding",
    "CorruptCheckpoint", "IoFailure",
    "__version__",
]
