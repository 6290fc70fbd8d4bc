"""Key-frame scheduling and the per-clip segmentation pipeline.

Key frames run the full segmentation network; every other frame receives
the propagated feature (warped forward frame by frame), a distortion map,
a correction cue from the current frame, and the guided fusion of the two.
The corrected feature, not the raw propagated one, is what continues down
the chain, so repairs compound instead of distortion.

Modes:
    full       predicted distortion map guides fusion (the method)
    prop-only  no correction at all; the propagated feature is segmented
    naive      fusion with a constant 0.5 map (correction without guidance)
    oracle     upper bound: the map is the ground-truth disagreement
               between the propagated prediction and the labels
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .correction import fuse_features
from .data.clips import VideoClip
from .data.sampling import supervised_frame
from .distortion import predict_distortion
from .errors import ConfigError, DataIntegrityError
from .networks import FEATURE_STRIDE, Networks, upsample_logits
from .propagation import propagate_step, start_state

MODES = ("full", "prop-only", "naive", "oracle")


@dataclass
class Schedule:
    interval: int
    flags: list[bool]

    def __post_init__(self):
        if not self.flags or not self.flags[0]:
            raise ConfigError("frame 0 must be a key frame")

    @property
    def num_frames(self) -> int:
        return len(self.flags)


def schedule_keyframes(num_frames: int, interval: int) -> Schedule:
    """Fixed-interval schedule: frame i is key iff i % interval == 0."""
    if interval < 1:
        raise ConfigError(f"interval must be >= 1, got {interval}")
    if num_frames < 1:
        raise ConfigError("schedule needs at least one frame")
    return Schedule(interval=interval, flags=[i % interval == 0 for i in range(num_frames)])


def nearest_downsample_labels(labels: Tensor, factor: int = FEATURE_STRIDE) -> Tensor:
    """Class indices are not interpolable; pick each block's center pixel."""
    if labels.shape[-2] % factor or labels.shape[-1] % factor:
        raise DataIntegrityError(f"label size {tuple(labels.shape)} not divisible by {factor}")
    off = factor // 2
    return labels[..., off::factor, off::factor]


@dataclass
class FrameResult:
    index: int
    is_key: bool
    distance: int
    pred: Tensor                      # (H, W) class indices at full resolution
    pred_feature_res: Tensor          # argmax of the segmented feature at stride 4
    prop_pred: Optional[Tensor] = None            # full-res argmax from the uncorrected feature
    prop_pred_feature_res: Optional[Tensor] = None
    distortion: Optional[Tensor] = None           # (1, h, w) map used for fusion


def _oracle_map(prop_argmax_feat: Tensor, gt: Tensor, ignore_index: int) -> Tensor:
    gt_feat = nearest_downsample_labels(gt)
    wrong = (prop_argmax_feat != gt_feat) & (gt_feat != ignore_index)
    return wrong.float().unsqueeze(0)


def segment_clip(
    clip: VideoClip,
    nets: Networks,
    schedule: Schedule,
    mode: str = "full",
    keep_maps: bool = False,
) -> list[FrameResult]:
    """Segment every frame of a clip under a key-frame schedule."""
    if mode not in MODES:
        raise ConfigError(f"unknown inference mode {mode!r}, expected one of {MODES}")
    if schedule.num_frames != len(clip):
        raise DataIntegrityError(
            f"schedule covers {schedule.num_frames} frames, clip has {len(clip)}"
        )
    if mode == "oracle":
        missing = [i for i, key in enumerate(schedule.flags) if not key and i not in clip.labels]
        if missing:
            raise DataIntegrityError(f"oracle mode needs labels at non-key frames {missing}")

    nets.eval_all()
    full_size = clip.frame_size
    results: list[FrameResult] = []
    state = None
    with torch.no_grad():
        for idx in range(len(clip)):
            frame = clip.frames[idx]
            if schedule.flags[idx]:
                feat, logits = nets.segnet(frame)
                state = start_state(feat, frame, idx)
                pred = upsample_logits(logits, full_size).argmax(0)
                results.append(FrameResult(
                    index=idx, is_key=True, distance=0, pred=pred,
                    pred_feature_res=logits.argmax(0),
                ))
                continue

            state, _ = propagate_step(state, frame, nets.flownet, FEATURE_STRIDE)
            f_prop = state.prop_feature
            logits_prop = nets.segnet.head_logits(f_prop)
            prop_argmax_feat = logits_prop.argmax(0)

            if mode == "prop-only":
                corrected = f_prop
                m = None
            else:
                if mode == "full":
                    m = predict_distortion(state.prop_frame, frame, nets.dmnet)
                elif mode == "naive":
                    m = torch.full((1, *f_prop.shape[-2:]), 0.5)
                else:  # oracle
                    m = _oracle_map(prop_argmax_feat, clip.labels[idx], clip.ignore_index)
                cue = nets.cfnet(frame)
                corrected = fuse_features(f_prop, cue, m)
                state.prop_feature = corrected

            logits_c = nets.segnet.head_logits(corrected)
            pred = upsample_logits(logits_c, full_size).argmax(0)
            results.append(FrameResult(
                index=idx, is_key=False,
                distance=idx - state.key_frame_index,
                pred=pred,
                pred_feature_res=logits_c.argmax(0),
                prop_pred=upsample_logits(logits_prop, full_size).argmax(0),
                prop_pred_feature_res=prop_argmax_feat,
                distortion=m if keep_maps and m is not None else None,
            ))
    return results


def segment_clip_oracle(
    clip: VideoClip, nets: Networks, schedule: Schedule, keep_maps: bool = False
) -> list[FrameResult]:
    """Upper-bound mode: fusion guided by the true disagreement map."""
    return segment_clip(clip, nets, schedule, mode="oracle", keep_maps=keep_maps)


def run_distance_eval(
    clip: VideoClip,
    nets: Networks,
    distance: int,
    mode: str = "full",
    eval_index: Optional[int] = None,
    keep_maps: bool = False,
) -> FrameResult:
    """Place the key `distance` frames before the evaluation frame and return
    the result at the evaluation frame (the distance/accuracy protocol)."""
    eval_idx = supervised_frame(clip) if eval_index is None else eval_index
    if eval_idx not in clip.labels:
        raise DataIntegrityError(f"{clip.clip_id}: frame {eval_idx} is not labeled")
    if distance < 0 or distance > eval_idx:
        raise DataIntegrityError(
            f"{clip.clip_id}: distance {distance} unreachable for eval frame {eval_idx}"
        )
    sub = clip.subclip(eval_idx - distance, eval_idx + 1)
    schedule = schedule_keyframes(len(sub), interval=distance + 1)
    results = segment_clip(sub, nets, schedule, mode=mode, keep_maps=keep_maps)
    final = results[-1]
    return FrameResult(
        index=eval_idx, is_key=final.is_key, distance=final.distance, pred=final.pred,
        pred_feature_res=final.pred_feature_res, prop_pred=final.prop_pred,
        prop_pred_feature_res=final.prop_pred_feature_res, distortion=final.distortion,
    )


def write_clip_predictions(
    out_root, clip_id: str, results: list[FrameResult], emit_intermediates: bool = False
) -> None:
    """Mirror the input layout: <out>/clips/<clip_id>/pred/%06d.png."""
    from pathlib import Path

    from PIL import Image

    pred_dir = Path(out_root) / "clips" / clip_id / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)
    debug_dir = Path(out_root) / "clips" / clip_id / "debug"
    if emit_intermediates:
        debug_dir.mkdir(parents=True, exist_ok=True)
    for r in results:
        Image.fromarray(r.pred.numpy().astype(np.uint8), "L").save(pred_dir / f"{r.index:06d}.png")
        if not emit_intermediates:
            continue
        if r.distortion is not None:
            m16 = (r.distortion[0].numpy() * 65535.0).round().astype(np.uint16)
            Image.fromarray(m16).save(debug_dir / f"{r.index:06d}_distortion.png")
        if r.prop_pred_feature_res is not None:
            Image.fromarray(r.prop_pred_feature_res.numpy().astype(np.uint8), "L").save(
                debug_dir / f"{r.index:06d}_prop_argmax.png"
            )
