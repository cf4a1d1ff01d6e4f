"""Adaptive-lasso estimation of a full spatial weights matrix and
location-specific mean-level breaks in spatiotemporal panels."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    ConvergenceError,
    MeanLevelSchedule,
    ModelSpec,
    PanelObservations,
    SpatialWeightMatrix,
    StationarityError,
    expected_panel,
    reduced_form,
    spectral_radius,
)
from .step1 import CandidateSets, DetectConfig, detect_candidates, run_all_locations  # noqa: E402
from .step2 import EstimateConfig, EstimationResult, build_joint_design, estimate, fit_joint  # noqa: E402

__all__ = [
    "ConvergenceError",
    "MeanLevelSchedule",
    "ModelSpec",
    "PanelObservations",
    "SpatialWeightMatrix",
    "StationarityError",
    "expected_panel",
    "reduced_form",
    "spectral_radius",
    "CandidateSets",
    "DetectConfig",
    "detect_candidates",
    "run_all_locations",
    "EstimateConfig",
    "EstimationResult",
    "build_joint_design",
    "estimate",
    "fit_joint",
]
