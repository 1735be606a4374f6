"""featvis: class-agnostic CNN feature visualization.

Builds weighted activation "facets" by clustering real-image embeddings,
then synthesizes images that maximize a dot-product activation objective
while minimizing an adaptive robust distance to the facet target.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    FeatvisError,
    LayerNotFoundError,
    NumericAbortError,
    ValidationError,
)
from .facets import Facet, build_facet, build_facets, facet_weights
from .model import LayerRef, ToyCNN
from .objective import LossBreakdown, RobustLossParams, adaptive_distance
from .pipeline import OptimizationConfig, RunTrace, Schedule, optimize, schedule_value

__all__ = [
    "ConfigError",
    "Facet",
    "FeatvisError",
    "LayerNotFoundError",
    "LayerRef",
    "LossBreakdown",
    "NumericAbortError",
    "OptimizationConfig",
    "RobustLossParams",
    "RunTrace",
    "Schedule",
    "ToyCNN",
    "ValidationError",
    "adaptive_distance",
    "build_facet",
    "build_facets",
    "facet_weights",
    "optimize",
    "schedule_value",
    "__version__",
]
