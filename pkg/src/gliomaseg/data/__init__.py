"""Volume ingestion and slice-level preprocessing."""

from .batching import BatchGenerator
from .nifti import (
    BadDimensionsError,
    BadMagicError,
    NiftiError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    UnsupportedVariantError,
    Volume,
    read_nifti,
    write_nifti,
)
from .phantom import generate_phantom
from .preprocess import (
    CaseRecord,
    DatasetSplit,
    SliceRangeError,
    SliceSample,
    case_samples,
    discover_cases,
    extract_slices,
    normalize,
    one_hot,
    remap_labels,
    resize_image,
    resize_mask,
    split_dataset,
)

__all__ = [
    "BatchGenerator",
    "BadDimensionsError",
    "BadMagicError",
    "NiftiError",
    "TruncatedPayloadError",
    "UnsupportedDatatypeError",
    "UnsupportedVariantError",
    "Volume",
    "read_nifti",
    "write_nifti",
    "generate_phantom",
    "CaseRecord",
    "DatasetSplit",
    "SliceRangeError",
    "SliceSample",
    "case_samples",
    "discover_cases",
    "extract_slices",
    "normalize",
    "one_hot",
    "remap_labels",
    "resize_image",
    "resize_mask",
    "split_dataset",
]
