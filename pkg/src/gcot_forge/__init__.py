"""Self-verified grounded chain-of-thought training-data pipeline."""

from .model import (
    CoTRecord,
    EvalReport,
    GcotForgeError,
    GCoTRecord,
    ImageRef,
    NBox,
    QASample,
    SubQuestion,
    Target,
    TrainingManifest,
    VerifiedBox,
    validate_nbox,
)

__all__ = [
    "CoTRecord",
    "EvalReport",
    "GcotForgeError",
    "GCoTRecord",
    "ImageRef",
    "NBox",
    "QASample",
    "SubQuestion",
    "Target",
    "TrainingManifest",
    "VerifiedBox",
    "validate_nbox",
]
