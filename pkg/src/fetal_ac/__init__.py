"""Fetal abdominal circumference estimation from ultrasound images.

Anechoic pixels are classified by a three-branch CNN into stomach bubble,
umbilical vein, amniotic fluid and shadow; an ellipse fitted to the fluid
boundary gives the circumference, and a second CNN judges whether the plane
is suitable for measurement.
"""
from .acceptance import (
    AcceptanceConfig,
    AcceptanceDecision,
    AcceptanceNet,
    augment,
    check_plane,
    crop_and_rescale,
    select_threshold,
    train_acceptance,
)
from .classifier import (
    ClassifierConfig,
    ClassifierNet,
    SemanticMap,
    TrainConfig,
    build_classifier,
    classify_patch,
    init_direction_filters,
    semantic_map,
    train_classifier,
)
from .config import RunConfig
from .ellipse import (
    ACMeasurement,
    Ellipse,
    HoughConfig,
    MeasureConfig,
    filter_candidates,
    hough_candidates,
    measure_ac,
    median_ellipse,
    ramanujan_perimeter,
)
from .errors import FetalACError
from .metrics import ConfusionMatrix2, accuracy, dice, evaluate_ac
from .patches import ClassLabel, PatchSample, PatchSet, UltrasoundImage, extract_views, propagation_direction
from .phantom import PhantomConfig, generate_dataset, generate_false_plane, generate_phantom

__all__ = [
    "ACMeasurement",
    "AcceptanceConfig",
    "AcceptanceDecision",
    "AcceptanceNet",
    "ClassLabel",
    "ClassifierConfig",
    "ClassifierNet",
    "ConfusionMatrix2",
    "Ellipse",
    "FetalACError",
    "HoughConfig",
    "MeasureConfig",
    "PatchSample",
    "PatchSet",
    "PhantomConfig",
    "RunConfig",
    "SemanticMap",
    "TrainConfig",
    "UltrasoundImage",
    "accuracy",
    "augment",
    "build_classifier",
    "check_plane",
    "classify_patch",
    "crop_and_rescale",
    "dice",
    "evaluate_ac",
    "extract_views",
    "filter_candidates",
    "generate_dataset",
    "generate_false_plane",
    "generate_phantom",
    "hough_candidates",
    "init_direction_filters",
    "measure_ac",
    "median_ellipse",
    "propagation_direction",
    "ramanujan_perimeter",
    "select_threshold",
    "semantic_map",
    "train_acceptance",
    "train_classifier",
]
