"""Accuracy and cost metrics: mIoU, distance/cost curves, rectification stats.

mIoU follows the dataset-wide convention: one confusion matrix accumulated
over every evaluated frame, per-class IoU = TP / (TP + FP + FN), classes
absent from both prediction and ground truth excluded from the mean.

The cost model prices the two frame paths of the pipeline in FLOPs at a
declared input size: c_seg for a key frame (segmentation network + head +
logit upsampling) and c_warp for a non-key frame (flow network, cue
network, both distortion-net branches, warps, fusion and head arithmetic).
The average per-frame cost at propagation distance d is
    mean_cost = (c_seg + c_warp * d) / (d + 1).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import DataIntegrityError
from .networks import (
    FEATURE_STRIDE,
    LayerSpec,
    Networks,
    describe_flops,
    layer_flops,
    trace_network_spec,
)


class ConfusionMatrix:
    """Accumulating [gt, pred] tally with ignore handling."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        if num_classes < 1:
            raise DataIntegrityError("need at least one class")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: Tensor | np.ndarray, gt: Tensor | np.ndarray) -> None:
        pred = pred.numpy() if isinstance(pred, Tensor) else pred
        gt = gt.numpy() if isinstance(gt, Tensor) else gt
        if pred.shape != gt.shape:
            raise DataIntegrityError(f"pred shape {pred.shape} != gt shape {gt.shape}")
        valid = gt != self.ignore_index
        if (pred[valid] >= self.num_classes).any() or (pred[valid] < 0).any():
            raise DataIntegrityError("prediction contains out-of-range class indices")
        if (gt[valid] >= self.num_classes).any() or (gt[valid] < 0).any():
            raise DataIntegrityError("ground truth contains out-of-range class indices")
        idx = gt[valid].astype(np.int64) * self.num_classes + pred[valid].astype(np.int64)
        self.matrix += np.bincount(idx, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.matrix += other.matrix
        return self

    def iou(self) -> tuple[float, list[float]]:
        if self.matrix.sum() == 0:
            raise DataIntegrityError("confusion matrix is empty (all pixels ignored?)")
        tp = np.diag(self.matrix).astype(np.float64)
        fp = self.matrix.sum(axis=0) - tp
        fn = self.matrix.sum(axis=1) - tp
        denom = tp + fp + fn
        per_class = [float(tp[k] / denom[k]) if denom[k] > 0 else float("nan") for k in range(self.num_classes)]
        present = [v for v in per_class if not math.isnan(v)]
        return float(np.mean(present)), per_class


def miou(
    preds: list[Tensor], gts: list[Tensor], num_classes: int, ignore_index: int = 255
) -> tuple[float, list[float]]:
    if not preds or len(preds) != len(gts):
        raise DataIntegrityError("need matching non-empty prediction/ground-truth lists")
    cm = ConfusionMatrix(num_classes, ignore_index)
    for p, g in zip(preds, gts):
        cm.update(p, g)
    return cm.iou()


# ---------------------------------------------------------------------------
# Cost model
# ---------------------------------------------------------------------------


@dataclass
class CostModel:
    c_seg: float
    c_warp: float
    input_size: tuple[int, int]
    unit: str = "FLOPs"
    breakdown: dict = field(default_factory=dict)


def mean_cost(model: CostModel, distance: int) -> float:
    """Average per-frame cost when keys are distance+1 frames apart."""
    if distance < 0:
        raise DataIntegrityError(f"propagation distance must be >= 0, got {distance}")
    return (model.c_seg + model.c_warp * distance) / (distance + 1)


def _non_network_costs(input_size: tuple[int, int], feature_channels: int,
                       dmnet_channels: int, num_classes: int) -> dict[str, list[LayerSpec]]:
    """Warp/fusion/head arithmetic that is not inside any traced module."""
    h, w = input_size
    fh, fw = h // FEATURE_STRIDE, w // FEATURE_STRIDE
    key_extras = [
        LayerSpec("bilinear-upsampling", "upsample_logits", num_classes, num_classes,
                  h_in=fh, w_in=fw, h_out=h, w_out=w),
    ]
    warp_extras = [
        LayerSpec("bilinear-upsampling", "warp_frame", 3, 3, h_in=h, w_in=w, h_out=h, w_out=w),
        LayerSpec("bilinear-upsampling", "downscale_flow", 2, 2, h_in=h, w_in=w, h_out=fh, w_out=fw),
        LayerSpec("bilinear-upsampling", "warp_feature", feature_channels, feature_channels,
                  h_in=fh, w_in=fw, h_out=fh, w_out=fw),
        # cosine similarity: one multiply-add plus norm op per embedding channel pair
        LayerSpec("activation", "cosine_similarity", 2 * dmnet_channels, 1,
                  h_in=fh, w_in=fw, h_out=fh, w_out=fw),
        LayerSpec("activation", "distortion_normalize", 1, 1, h_in=fh, w_in=fw, h_out=fh, w_out=fw),
        # fusion: three elementwise ops per feature channel
        LayerSpec("activation", "fuse_features", 3 * feature_channels, feature_channels,
                  h_in=fh, w_in=fw, h_out=fh, w_out=fw),
        LayerSpec("convolution", "seghead", feature_channels, num_classes,
                  h_in=fh, w_in=fw, h_out=fh, w_out=fw),
        LayerSpec("bilinear-upsampling", "upsample_logits", num_classes, num_classes,
                  h_in=fh, w_in=fw, h_out=h, w_out=w),
    ]
    return {"key": key_extras, "non_key": warp_extras}


def build_cost_model(nets: Networks, input_size: tuple[int, int]) -> CostModel:
    """Trace every network at input_size and assemble the cost triple."""
    h, w = input_size
    frame = torch.zeros(1, 3, h, w)
    seg = describe_flops(trace_network_spec(nets.segnet, (frame,), "segnet"), input_size)
    flow = describe_flops(trace_network_spec(nets.flownet, (frame, frame), "flownet"), input_size)
    dm = describe_flops(trace_network_spec(nets.dmnet, (frame,), "dmnet"), input_size)
    cf = describe_flops(trace_network_spec(nets.cfnet, (frame,), "cfnet"), input_size)
    extras = _non_network_costs(input_size, nets.feature_channels,
                                nets.dmnet.channels, nets.num_classes)
    key_extra = sum(layer_flops(l) for l in extras["key"])
    warp_extra = sum(layer_flops(l) for l in extras["non_key"])

    c_seg = seg.total + key_extra
    # the siamese distortion extractor runs on both the propagated and current frame
    c_warp = flow.total + cf.total + 2 * dm.total + warp_extra
    breakdown = {
        "networks": {r.network: r.to_dict() for r in (seg, flow, dm, cf)},
        "key_path": {"segnet": seg.total, "extras": key_extra, "total": c_seg},
        "non_key_path": {
            "flownet": flow.total,
            "cfnet": cf.total,
            "dmnet_both_branches": 2 * dm.total,
            "extras": warp_extra,
            "total": c_warp,
        },
        "extras_detail": {
            side: [{"name": l.name, "kind": l.kind, "flops": layer_flops(l)} for l in layers]
            for side, layers in extras.items()
        },
    }
    return CostModel(c_seg=float(c_seg), c_warp=float(c_warp), input_size=input_size,
                     breakdown=breakdown)


# ---------------------------------------------------------------------------
# Curves
# ---------------------------------------------------------------------------


@dataclass
class CurveSeries:
    label: str
    points: list[tuple[float, float]]

    @property
    def mean_y(self) -> float:
        return float(np.mean([y for _, y in self.points]))


def pda_curve(miou_by_distance: dict[int, float], label: str = "pda",
              distances: list[int] | None = None) -> CurveSeries:
    """Distance/accuracy series; every requested distance must be present."""
    wanted = distances if distances is not None else sorted(miou_by_distance)
    missing = [d for d in wanted if d not in miou_by_distance]
    if missing:
        raise DataIntegrityError(f"missing evaluation runs for distances {missing}")
    points = [(float(d), float(miou_by_distance[d])) for d in sorted(wanted)]
    for (xa, _), (xb, _) in zip(points, points[1:]):
        if xb <= xa:
            raise DataIntegrityError("distances must be strictly increasing")
    return CurveSeries(label=label, points=points)


def cca_curve(pda: CurveSeries, model: CostModel, label: str | None = None) -> CurveSeries:
    """Reprice a distance/accuracy series as mean-cost/accuracy (GFLOPs)."""
    points = [(mean_cost(model, int(d)) / 1e9, y) for d, y in pda.points]
    return CurveSeries(label=label or f"{pda.label}-cca", points=points)


# ---------------------------------------------------------------------------
# Rectification statistics
# ---------------------------------------------------------------------------


@dataclass
class FalseCorrectionStats:
    wrong_rectified: int = 0      # propagated right, corrected wrong
    right_rectified: int = 0      # propagated wrong, corrected right
    unchanged_correct: int = 0    # right before and after
    unchanged_wrong: int = 0      # wrong before and after

    @property
    def total(self) -> int:
        return (self.wrong_rectified + self.right_rectified
                + self.unchanged_correct + self.unchanged_wrong)

    @property
    def degenerate(self) -> bool:
        return self.right_rectified == 0

    @property
    def ratio(self) -> float:
        """wrong/right; 0 when nothing was rectified, inf when only harm."""
        if self.right_rectified == 0:
            return 0.0 if self.wrong_rectified == 0 else float("inf")
        return self.wrong_rectified / self.right_rectified

    def merge(self, other: "FalseCorrectionStats") -> "FalseCorrectionStats":
        self.wrong_rectified += other.wrong_rectified
        self.right_rectified += other.right_rectified
        self.unchanged_correct += other.unchanged_correct
        self.unchanged_wrong += other.unchanged_wrong
        return self


def false_correction_stats(
    seg_p: Tensor, seg_c: Tensor, gt: Tensor, ignore_index: int = 255
) -> FalseCorrectionStats:
    """Partition valid pixels by (propagated correct?) x (corrected correct?)."""
    if seg_p.shape != seg_c.shape or seg_p.shape != gt.shape:
        raise DataIntegrityError("false_correction_stats: shape mismatch")
    valid = gt != ignore_index
    p_ok = (seg_p == gt) & valid
    c_ok = (seg_c == gt) & valid
    return FalseCorrectionStats(
        wrong_rectified=int((p_ok & ~c_ok).sum()),
        right_rectified=int((~p_ok & c_ok & valid).sum()),
        unchanged_correct=int((p_ok & c_ok).sum()),
        unchanged_wrong=int((~p_ok & ~c_ok & valid).sum()),
    )


def average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    """Area under the precision-recall curve of a soft score vs binary target."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    targets = np.asarray(targets).ravel().astype(bool)
    n_pos = int(targets.sum())
    if n_pos == 0 or n_pos == targets.size:
        raise DataIntegrityError("average precision needs both classes present")
    order = np.argsort(-scores, kind="stable")
    hits = targets[order].astype(np.float64)
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    return float((precision * hits).sum() / n_pos)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def write_pda_csv(path: str | Path, curve: CurveSeries,
                  per_class: dict[int, list[float]] | None = None) -> None:
    per_class = per_class or {}
    n_class = max((len(v) for v in per_class.values()), default=0)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["distance", "miou"] + [f"class_{k}" for k in range(n_class)])
        for d, y in curve.points:
            row = [int(d), f"{y:.6f}"]
            row += [f"{v:.6f}" for v in per_class.get(int(d), [])]
            writer.writerow(row)


def read_pda_csv(path: str | Path) -> dict[int, float]:
    path = Path(path)
    if not path.is_file():
        raise DataIntegrityError(f"missing curve file {path}")
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[int(row["distance"])] = float(row["miou"])
    return out


def write_cca_csv(path: str | Path, distances: list[int], cca: CurveSeries) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["distance", "mean_gflops", "miou"])
        for d, (x, y) in zip(distances, cca.points):
            writer.writerow([d, f"{x:.6f}", f"{y:.6f}"])


def write_false_correction_csv(path: str | Path, stats_by_mode: dict[str, FalseCorrectionStats]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["mode", "wrong_rectified", "right_rectified",
                         "unchanged_correct", "unchanged_wrong", "ratio", "degenerate"])
        for mode, s in stats_by_mode.items():
            writer.writerow([mode, s.wrong_rectified, s.right_rectified,
                             s.unchanged_correct, s.unchanged_wrong,
                             "inf" if math.isinf(s.ratio) else f"{s.ratio:.6f}",
                             int(s.degenerate)])


def write_flops_json(path: str | Path, model: CostModel) -> None:
    payload = {
        "unit": model.unit,
        "input_size": list(model.input_size),
        "c_seg": model.c_seg,
        "c_warp": model.c_warp,
        "breakdown": model.breakdown,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
