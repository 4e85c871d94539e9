from stainbridge.data.dataset import (
    HEMIT_SPLIT_COUNTS,
    MANIFEST_NAME,
    SPLITS,
    PairedSample,
    SplitManifest,
    assign_splits,
    load_dataset,
)
from stainbridge.data.macenko import (
    REFERENCE_MAX_CONCENTRATIONS,
    REFERENCE_STAINS,
    StainBasis,
    compose_from_stains,
    concentrations,
    estimate_stain_basis,
    macenko_normalize,
    optical_density,
    tissue_mask,
)
from stainbridge.data.tiling import crop_patches, tile_offsets, trim_margin

__all__ = [
    "HEMIT_SPLIT_COUNTS", "MANIFEST_NAME", "REFERENCE_MAX_CONCENTRATIONS", "REFERENCE_STAINS",
    "SPLITS", "PairedSample", "SplitManifest", "StainBasis", "assign_splits",
    "compose_from_stains", "concentrations", "crop_patches", "estimate_stain_basis",
    "load_dataset", "macenko_normalize", "optical_density", "tile_offsets", "tissue_mask",
    "trim_margin",
]
