"""Joint action recognition and 3-D action localization in mapped environments."""
from .estimator import EnvironmentEncoder, JointActionLocalizer, LocationPriorEncoder
from .evaluation import EvalReport, evaluate, localization_metrics, recognition_metrics
from .location_prior import CameraTrack, LocationDistribution, downsample_distribution, make_prior
from .mesh_env import (DescriptorKind, EnvDescriptor, GridSpec, MeshFormatError, SemanticMesh,
                       build_affordance, build_ground_plane, build_hvr, build_semvoxel, parse_mesh)
from .model import EpisodeClip, ModelConfig
from .synthgen import SynthConfig, generate_split

__version__ = "0.1.0"

__all__ = [
    "CameraTrack", "DescriptorKind", "EnvDescriptor", "EnvironmentEncoder", "EpisodeClip",
    "EvalReport", "GridSpec", "JointActionLocalizer", "LocationDistribution",
    "LocationPriorEncoder", "MeshFormatError", "ModelConfig", "SemanticMesh", "SynthConfig",
    "build_affordance", "build_ground_plane", "build_hvr", "build_semvoxel",
    "downsample_distribution", "evaluate", "generate_split", "localization_metrics",
    "make_prior", "parse_mesh", "recognition_metrics",
]
