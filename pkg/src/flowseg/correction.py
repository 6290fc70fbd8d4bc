"""Feature correction: distortion-weighted cue training and guided fusion.

fuse_features forms the per-position convex combination
    corrected = propagated * (1 - M) + cue * M
so the cue dominates exactly where the distortion map says propagation is
unreliable. dgfl_loss is the distortion-weighted cross-entropy that makes
the cue network spend its (small) capacity on those regions.

The distortion map enters both as a constant: gradients are stopped so the
frozen distortion predictor and the propagated-frame chain stay decoupled
from cue training.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import DataIntegrityError


def fuse_features(f_prop: Tensor, f_cue: Tensor, distortion: Tensor) -> Tensor:
    """Distortion-guided fusion; distortion broadcasts across channels.

    Shapes: features (C,h,w) or (N,C,h,w); distortion (h,w), (1,h,w) or
    (N,1,h,w). Endpoints are exact: M = 0 returns f_prop bit-for-bit,
    M = 1 returns f_cue.
    """
    if f_prop.shape != f_cue.shape:
        raise DataIntegrityError(
            f"feature shapes differ: {tuple(f_prop.shape)} vs {tuple(f_cue.shape)}"
        )
    m = distortion.detach()
    if m.ndim == f_prop.ndim - 1:
        m = m.unsqueeze(-3)
    if m.shape[-2:] != f_prop.shape[-2:]:
        raise DataIntegrityError(
            f"distortion size {tuple(m.shape[-2:])} does not match features {tuple(f_prop.shape[-2:])}"
        )
    if m.min() < 0.0 or m.max() > 1.0:
        raise DataIntegrityError("distortion map values must lie in [0, 1]")
    return f_prop * (1.0 - m) + f_cue * m


def weighted_cross_entropy(
    logits: Tensor, labels: Tensor, weights: Tensor | None, ignore_index: int = 255
) -> Tensor:
    """Per-sample weighted negative log-likelihood at label resolution.

    logits (N,K,H,W), labels (N,H,W), weights (N,H,W) or None for the
    unweighted loss. Each sample is averaged over its non-ignored
    positions; ignored positions contribute nothing. Returns (N,) losses.
    """
    if logits.shape[-2:] != labels.shape[-2:]:
        raise DataIntegrityError(
            f"logits size {tuple(logits.shape[-2:])} does not match labels {tuple(labels.shape[-2:])}"
        )
    valid = labels != ignore_index
    counts = valid.sum(dim=(-2, -1))
    if (counts == 0).any():
        raise DataIntegrityError("cross entropy: a sample has no non-ignored positions")
    logp = torch.log_softmax(logits, dim=-3)
    safe_labels = labels.masked_fill(~valid, 0)
    picked = logp.gather(-3, safe_labels.unsqueeze(-3)).squeeze(-3)
    if weights is None:
        weighted = -picked
    else:
        weighted = -(weights.detach() * picked)
    weighted = weighted * valid
    return weighted.sum(dim=(-2, -1)) / counts


def dgfl_loss(
    logits_cue: Tensor, gt: Tensor, distortion: Tensor, ignore_index: int = 255
) -> Tensor:
    """Distortion-weighted cross-entropy for the correction cue.

    All inputs live at label resolution (logits and distortion already
    bilinearly upsampled). Unbatched (K,H,W)/(H,W)/(h,w)-style input is
    lifted to a batch of one; returns the scalar mean over samples.
    """
    single = logits_cue.ndim == 3
    logits_b = logits_cue[None] if single else logits_cue
    gt_b = gt[None] if single else gt
    m = distortion
    if m.ndim == logits_b.ndim:     # (N,1,H,W) -> (N,H,W)
        m = m.squeeze(-3)
    if single and m.ndim == 2:
        m = m[None]
    if m.shape != gt_b.shape:
        raise DataIntegrityError(
            f"distortion shape {tuple(m.shape)} does not match labels {tuple(gt_b.shape)}"
        )
    return weighted_cross_entropy(logits_b, gt_b, m, ignore_index).mean()
