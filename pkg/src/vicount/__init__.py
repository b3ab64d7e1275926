"""Video individual counting via shared/inflow/outflow density maps."""

from .annotations import (
    ClipAnnotation,
    FlowDecomposition,
    FrameAnnotation,
    HeadPoint,
    Supervision,
    count_unique,
    derive_flow,
    derive_flow_weak,
    parse_annotation_file,
)
from .density import DensityMap, GtBundle, KernelSpec, MapRole, gt_bundle, mass, rasterize
from .inference import VideoCountResult, count_video, count_video_oracle, predict_pair
from .metrics import VideoEvalRecord, mae_rmse, miae_moae, wrae
from .model import ModelConfig, VICModel, build_model, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate, weak_labels_from_ids
from .training import PairSample, TrainConfig, loss, sample_pair, train

__version__ = "0.1.0"

__all__ = [
    "ClipAnnotation",
    "DensityMap",
    "FlowDecomposition",
    "FrameAnnotation",
    "GtBundle",
    "HeadPoint",
    "KernelSpec",
    "MapRole",
    "ModelConfig",
    "PairSample",
    "Supervision",
    "SynthConfig",
    "TrainConfig",
    "VICModel",
    "VideoCountResult",
    "VideoEvalRecord",
    "build_model",
    "count_unique",
    "count_video",
    "count_video_oracle",
    "derive_flow",
    "derive_flow_weak",
    "generate",
    "gt_bundle",
    "load_checkpoint",
    "loss",
    "mae_rmse",
    "mass",
    "miae_moae",
    "parse_annotation_file",
    "predict_pair",
    "rasterize",
    "sample_pair",
    "save_checkpoint",
    "train",
    "weak_labels_from_ids",
    "wrae",
]
