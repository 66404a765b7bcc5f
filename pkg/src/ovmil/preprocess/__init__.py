from .augment import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    AugmentParams,
    augment_copies,
    channel_standardise,
    channel_unstandardise,
    colour_augment,
)
from .stain import (
    DegenerateStainError,
    DegenerateTileError,
    InsufficientTissueError,
    LabStats,
    MacenkoReference,
    estimate_stain_matrix,
    fit_macenko_reference,
    macenko_analyse,
    macenko_normalise,
    reinhard_normalise,
    stain_concentrations,
)
from .tissue import (
    DegenerateHistogramError,
    GeometryError,
    downsample,
    otsu_threshold,
    patch_grid,
    saturation_channel,
    saturation_histogram,
    segment_tissue_fixed,
    segment_tissue_otsu,
    segmentation_preview,
)
