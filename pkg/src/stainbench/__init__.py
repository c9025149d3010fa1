"""stainbench: H&E stain normalization methods and a synthetic benchmark suite."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConditioningError,
    ConfigError,
    ImageError,
    MetricError,
    NormalizerFitError,
    NormalizerTransformError,
    PatchExtractionError,
    StainBenchError,
    StainEstimationError,
)
from .image import (
    OdImage,
    PatchSpec,
    RasterImage,
    extract_patches,
    lab_to_rgb,
    luminance,
    od_to_rgb,
    otsu_mask,
    otsu_threshold,
    rgb_to_lab,
    rgb_to_od,
)
from .io import read_image, write_image
from .stains import (
    ConcentrationMap,
    StainMatrix,
    default_stain_matrix,
    macenko_estimate,
    ruifrok_extract,
    ruifrok_separate,
    stain_vector_distance,
    vahadane_estimate,
    vahadane_factorize,
)
