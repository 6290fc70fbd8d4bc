"""Distortion-map prediction and its training targets.

A distortion map M estimates, per stride-4 position, how unreliable the
propagated feature is: M = (1 - S) / 2 where S is the per-position cosine
similarity between siamese embeddings of the current frame and of the
propagated frame. Identical frames therefore give M = 0 exactly, and
M -> 1 where image content disagrees.

The training target is the binary disagreement (XOR) between the class
argmax of the propagated feature and the class argmax of the current
frame's own segmentation, both taken at feature resolution.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import DataIntegrityError
from .networks import DMNet

COSINE_EPS = 1e-8


def similarity_map(fa: Tensor, fb: Tensor) -> Tensor:
    """Per-position cosine of channel vectors; (C,h,w) -> (1,h,w), batched alike.

    Guarded as (<fa,fb> + eps) / (|fa||fb| + eps): equal inputs score exactly
    1 (so the null-distortion identity holds for any parameters, zero
    vectors included) and the output always lies in [-1, 1].
    """
    if fa.shape != fb.shape:
        raise DataIntegrityError(f"feature shapes differ: {tuple(fa.shape)} vs {tuple(fb.shape)}")
    channel_dim = 0 if fa.ndim == 3 else 1
    dot = (fa * fb).sum(dim=channel_dim, keepdim=True)
    norms = fa.norm(dim=channel_dim, keepdim=True) * fb.norm(dim=channel_dim, keepdim=True)
    # clamp guards the cosine range against floating-point ulp overshoot
    return ((dot + COSINE_EPS) / (norms + COSINE_EPS)).clamp(-1.0, 1.0)


def distortion_from_similarity(similarity: Tensor) -> Tensor:
    """Affine map of cosine range onto [0, 1]: M = (1 - S) / 2."""
    return (1.0 - similarity) * 0.5


def predict_distortion(prop_frame: Tensor, cur_frame: Tensor, dmnet: DMNet) -> Tensor:
    """Distortion map of a propagated frame against the current frame."""
    if prop_frame.shape != cur_frame.shape:
        raise DataIntegrityError(
            f"frame shapes differ: {tuple(prop_frame.shape)} vs {tuple(cur_frame.shape)}"
        )
    f_cur = dmnet.features(cur_frame)
    f_prop = dmnet.features(prop_frame)
    return distortion_from_similarity(similarity_map(f_cur, f_prop))


def distortion_ground_truth(
    seg_a: Tensor, seg_b: Tensor, ignore_index: int = 255
) -> Tensor:
    """Binary disagreement map of two class-index maps (float, same shape).

    Positions carrying ignore_index in either map are zeroed; pair with
    valid_disagreement_mask to exclude them from losses.
    """
    if seg_a.shape != seg_b.shape:
        raise DataIntegrityError(f"label shapes differ: {tuple(seg_a.shape)} vs {tuple(seg_b.shape)}")
    differ = (seg_a != seg_b) & (seg_a != ignore_index) & (seg_b != ignore_index)
    return differ.float()


def valid_disagreement_mask(seg_a: Tensor, seg_b: Tensor, ignore_index: int = 255) -> Tensor:
    return (seg_a != ignore_index) & (seg_b != ignore_index)


def dump_distortion_debug(
    directory, index: int, similarity: Tensor, m_pred: Tensor, m_gt: Tensor
) -> None:
    """Write one (similarity, prediction, target) triplet as 16-bit PNGs."""
    from pathlib import Path

    import numpy as np
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = {
        "similarity": (similarity.detach() + 1.0) * 0.5,  # [-1,1] -> [0,1]
        "pred": m_pred.detach(),
        "target": m_gt.detach(),
    }
    for name, values in layers.items():
        arr = (values.squeeze().cpu().numpy() * 65535.0).round().astype(np.uint16)
        Image.fromarray(arr).save(directory / f"{index:06d}_{name}.png")


def dmnet_loss(
    m_pred: Tensor,
    m_gt: Tensor,
    valid: Tensor | None = None,
    weight_clamp: tuple[float, float] = (1.0, 100.0),
) -> Tensor:
    """Class-balanced binary cross-entropy against the binary target.

    The positive class is reweighted by (#negatives / #positives) of the
    batch, clamped to weight_clamp; distorted pixels are sparse and the
    unweighted loss collapses to the all-clean predictor at this scale.
    The mean runs over valid (unmasked) positions.
    """
    if m_pred.shape != m_gt.shape:
        raise DataIntegrityError(f"map shapes differ: {tuple(m_pred.shape)} vs {tuple(m_gt.shape)}")
    if valid is None:
        valid = torch.ones_like(m_gt, dtype=torch.bool)
    if not valid.any():
        raise DataIntegrityError("dmnet_loss: no valid positions")
    pred = m_pred[valid].clamp(1e-7, 1.0 - 1e-7)
    gt = m_gt[valid]
    n_pos = gt.sum()
    n_neg = gt.numel() - n_pos
    if n_pos > 0:
        pos_weight = (n_neg / n_pos).clamp(*weight_clamp)
    else:
        pos_weight = torch.ones((), dtype=pred.dtype)
    losses = -(pos_weight * gt * pred.log() + (1.0 - gt) * (1.0 - pred).log())
    return losses.mean()
