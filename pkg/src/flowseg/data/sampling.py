"""Training-sample selection.

Triplets follow the video-supervision protocol: the supervised frame f3 is
the last labeled frame of the clip, the key frame f1 sits a uniform 1..9
frames before it (clipped to the clip start), and the intermediate frame
f2 is uniform over the open interval (f1, f3). When f1 and f3 are adjacent
the triplet degenerates to a pair and the intermediate supervision leg
disappears.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DataIntegrityError
from .clips import VideoClip

MAX_KEY_DISTANCE = 9


@dataclass(frozen=True)
class TrainingTriplet:
    f1_idx: int
    f2_idx: Optional[int]
    f3_idx: int

    def __post_init__(self):
        if self.f2_idx is not None and not (self.f1_idx < self.f2_idx < self.f3_idx):
            raise DataIntegrityError(f"triplet indices out of order: {self}")
        if self.f2_idx is None and self.f3_idx - self.f1_idx != 1:
            raise DataIntegrityError(f"pair triplet must be adjacent: {self}")


def supervised_frame(clip: VideoClip) -> int:
    """The last labeled frame, which anchors every triplet."""
    if not clip.labels:
        raise DataIntegrityError(f"{clip.clip_id}: no labeled frame")
    return max(clip.labels)


def sample_training_triplet(
    clip: VideoClip, rng: np.random.Generator, max_distance: int = MAX_KEY_DISTANCE
) -> TrainingTriplet:
    f3 = supervised_frame(clip)
    if f3 < 2:
        raise DataIntegrityError(
            f"{clip.clip_id}: labeled frame {f3} has fewer than 2 predecessors"
        )
    distance = int(rng.integers(1, min(max_distance, f3) + 1))
    f1 = f3 - distance
    f2 = None if distance == 1 else int(rng.integers(f1 + 1, f3))
    return TrainingTriplet(f1, f2, f3)


def sample_dmnet_pair(
    clip: VideoClip, rng: np.random.Generator, k_range: tuple[int, int] = (1, MAX_KEY_DISTANCE)
) -> tuple[int, int]:
    """A (t, t+k) pair with k uniform over k_range, both indices in-clip."""
    k_min, k_max = k_range
    if not (1 <= k_min <= k_max):
        raise DataIntegrityError(f"bad k_range {k_range}")
    if len(clip) <= k_max:
        raise DataIntegrityError(
            f"{clip.clip_id}: {len(clip)} frames is too short for k up to {k_max}"
        )
    k = int(rng.integers(k_min, k_max + 1))
    t = int(rng.integers(0, len(clip) - k))
    return t, t + k


def hflip_frame(frame: np.ndarray | "torch.Tensor"):
    """Mirror an image/feature (..., H, W) horizontally."""
    return frame.flip(-1) if hasattr(frame, "flip") else frame[..., ::-1].copy()


def hflip_flow(flow):
    """Mirror a flow field: x order reverses and u changes sign."""
    flipped = hflip_frame(flow)
    if hasattr(flipped, "clone"):
        flipped = flipped.clone()
        flipped[0] = -flipped[0]
    else:
        flipped[0] = -flipped[0]
    return flipped
