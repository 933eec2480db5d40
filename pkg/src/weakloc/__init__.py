"""Weakly-supervised spatio-temporal action localization by discriminative clustering."""

from .constraints import (Annotation, Bag, ConstraintError, SupervisionLevel, VideoConstraintSet,
                          build_constraints, build_video_constraints, mix_levels)
from .evaluation import match, video_map
from .lmo import lmo, lmo_bruteforce
from .model import (ActionInstance, BoundingBox, DataError, Dataset, DetectionRecord, Track,
                    Tracklet, Video)
from .objective import NumericalError, RidgeCache, build_cache, h_value
from .solver import BCFWSolver, SolverConfig
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "ActionInstance", "Annotation", "Bag", "BCFWSolver", "BoundingBox", "ConstraintError",
    "DataError", "Dataset", "DetectionRecord", "NumericalError", "RidgeCache", "SolverConfig",
    "SupervisionLevel", "SynthConfig", "Track", "Tracklet", "Video", "VideoConstraintSet",
    "build_cache", "build_constraints", "build_video_constraints", "generate", "h_value", "lmo",
    "lmo_bruteforce", "match", "mix_levels", "video_map",
]
