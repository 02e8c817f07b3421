from .bundle_io import (
    BadMagicError,
    BundleFormatError,
    ChecksumError,
    TruncatedPayloadError,
    VersionMismatchError,
    read_bundle_file,
    write_bundle_file,
)
from .bundles import FeatureScaler, make_batch, pad_concepts, slot_concepts, split_by_patient
from .extract import ExtractorConfig, extract_concepts
from .synth import InfeasibleGeometryError, SynthSpec, SyntheticSample, generate_synthetic
from .types import ConceptBundle, ConceptRecord, FeatureBatch, bbox_iou

__all__ = [
    "BadMagicError", "BundleFormatError", "ChecksumError", "ConceptBundle", "ConceptRecord",
    "ExtractorConfig", "FeatureBatch", "FeatureScaler", "InfeasibleGeometryError", "SynthSpec", "SyntheticSample",
    "TruncatedPayloadError", "VersionMismatchError", "bbox_iou", "extract_concepts",
    "generate_synthetic", "make_batch", "pad_concepts", "read_bundle_file", "slot_concepts", "split_by_patient",
    "write_bundle_file",
]
