"""Exception hierarchy shared across the package.

Everything raised deliberately by stainbench derives from StainBenchError so
callers (and the CLI) can distinguish computation failures from plain bugs.
"""


class StainBenchError(Exception):
    """Base class for all stainbench errors."""


class ImageError(StainBenchError):
    """Invalid image shape, channel count, or value range."""


class PatchExtractionError(StainBenchError):
    """No patch positions satisfy the requested constraints."""


class StainEstimationError(StainBenchError):
    """Stain vector estimation failed (too little tissue, degenerate data)."""


class ConditioningError(StainBenchError):
    """Stain vectors are too close to parallel for a stable deconvolution."""


class NormalizerFitError(StainBenchError):
    """Reference image cannot support fitting the requested normalizer."""


class NormalizerTransformError(StainBenchError):
    """Transforming a source image failed; carries the method name."""

    def __init__(self, method, message):
        super().__init__(f"{method}: {message}")
        self.method = method


class MetricError(StainBenchError):
    """Metric inputs are mismatched, too small, or degenerate."""


class CheckpointError(StainBenchError):
    """Parameter checkpoint is malformed or does not match the model."""


class ConfigError(StainBenchError):
    """Configuration file or option set is invalid."""
