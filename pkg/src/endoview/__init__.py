"""Position-constrained best view-point retrieval for repeat endoscopic surveys."""

from .colorspace import ColorSpace, PlanarImage, convert
from .dataset import Frame, Intervention, Modality, Pose, ScoreRecord, load_intervention, save_intervention
from .descriptors import DescriptorConfig, DescriptorVector, Family, describe, extract
from .harness import ComboStats, compute_stats, retrieval_rate, sweep_combos, sweep_radius
from .localization import RigidTransform, SearchConfig, knn_within_radius, register_landmarks
from .matching import MatchReport, best_viewpoint, chi_squared
from .synthgen import GroundTruth, generate_pair
from .uifilter import FilterModel, cross_validate, train_filter

__version__ = "0.1.0"

__all__ = [
    "ColorSpace",
    "ComboStats",
    "DescriptorConfig",
    "DescriptorVector",
    "Family",
    "FilterModel",
    "Frame",
    "GroundTruth",
    "Intervention",
    "MatchReport",
    "Modality",
    "PlanarImage",
    "Pose",
    "RigidTransform",
    "ScoreRecord",
    "SearchConfig",
    "best_viewpoint",
    "chi_squared",
    "compute_stats",
    "convert",
    "cross_validate",
    "describe",
    "extract",
    "generate_pair",
    "knn_within_radius",
    "load_intervention",
    "register_landmarks",
    "retrieval_rate",
    "save_intervention",
    "sweep_combos",
    "sweep_radius",
    "train_filter",
]
