from .clips import SegDataset, VideoClip, load_clip
from .flo import read_flo, write_flo
from .sampling import (
    TrainingTriplet,
    hflip_flow,
    hflip_frame,
    sample_dmnet_pair,
    sample_training_triplet,
    supervised_frame,
)
from .synthetic import build_scene, class_palette, generate_clip, generate_synthetic_dataset

__all__ = [
    "SegDataset",
    "VideoClip",
    "load_clip",
    "read_flo",
    "write_flo",
    "TrainingTriplet",
    "sample_dmnet_pair",
    "sample_training_triplet",
    "supervised_frame",
    "hflip_flow",
    "hflip_frame",
    "build_scene",
    "class_palette",
    "generate_clip",
    "generate_synthetic_dataset",
]
