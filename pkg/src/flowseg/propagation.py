"""Flow-guided bilinear warping and the sequential propagation state.

Conventions used everywhere in this package:
  * tensors are channels-first; ops accept (H, W), (C, H, W) or (N, C, H, W)
  * a flow field is a (2, H, W) or (N, 2, H, W) tensor, channel 0 = x
    displacement (u), channel 1 = y displacement (v), in pixels of the grid
    it applies to
  * warping is backward: out(p) = bilinear sample of src at p + flow(p),
    so warping frame t by the stored flow of the pair (t, t+1) reconstructs
    frame t+1. Samples falling outside the grid read as zero.

The warp is implemented directly (gather + lerp) rather than through
grid_sample: it avoids the [-1, 1] coordinate round trip, which makes the
zero-flow warp a bit-exact identity, and it is differentiable with respect
to both the source and the flow.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import DataIntegrityError


def _batched(x: Tensor, kind: str) -> tuple[Tensor, int]:
    """Lift (H,W)/(C,H,W)/(N,C,H,W) to (N,C,H,W); return original ndim."""
    nd = x.ndim
    if nd == 2:
        return x[None, None], nd
    if nd == 3:
        return x[None], nd
    if nd == 4:
        return x, nd
    raise DataIntegrityError(f"{kind} must have 2-4 dims, got shape {tuple(x.shape)}")


def _debatch(x: Tensor, ndim: int) -> Tensor:
    if ndim == 2:
        return x[0, 0]
    if ndim == 3:
        return x[0]
    return x


def warp_bilinear(src: Tensor, flow: Tensor) -> Tensor:
    """Backward-warp src by flow with zero padding outside the grid.

    src: (H,W), (C,H,W) or (N,C,H,W); flow: (2,H,W) or (N,2,H,W) at the same
    spatial size. A single flow broadcasts over a batched src.
    """
    if not torch.isfinite(flow).all():
        raise DataIntegrityError("flow contains non-finite values")
    src_b, src_nd = _batched(src, "src")
    flow_b, _ = _batched(flow, "flow")
    if flow_b.shape[1] != 2:
        raise DataIntegrityError(f"flow must have 2 channels, got {flow_b.shape[1]}")
    n, c, h, w = src_b.shape
    if flow_b.shape[-2:] != (h, w):
        raise DataIntegrityError(
            f"flow resolution {tuple(flow_b.shape[-2:])} does not match src {(h, w)}"
        )
    if flow_b.shape[0] == 1 and n > 1:
        flow_b = flow_b.expand(n, -1, -1, -1)
    elif flow_b.shape[0] != n:
        raise DataIntegrityError("flow batch does not match src batch")

    dtype = src_b.dtype
    device = src_b.device
    gy, gx = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype),
        torch.arange(w, device=device, dtype=dtype),
        indexing="ij",
    )
    sx = gx + flow_b[:, 0].to(dtype)
    sy = gy + flow_b[:, 1].to(dtype)

    x0 = sx.floor()
    y0 = sy.floor()
    tx = (sx - x0).unsqueeze(1)
    ty = (sy - y0).unsqueeze(1)
    x0i = x0.long()
    y0i = y0.long()

    flat_src = src_b.reshape(n, c, h * w)

    def corner(xi: Tensor, yi: Tensor) -> Tensor:
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(n, 1, h * w)
        vals = flat_src.gather(2, idx.expand(n, c, h * w)).reshape(n, c, h, w)
        return vals * inside.unsqueeze(1).to(dtype)

    v00 = corner(x0i, y0i)
    v10 = corner(x0i + 1, y0i)
    v01 = corner(x0i, y0i + 1)
    v11 = corner(x0i + 1, y0i + 1)

    out = (
        v00 * (1 - tx) * (1 - ty)
        + v10 * tx * (1 - ty)
        + v01 * (1 - tx) * ty
        + v11 * tx * ty
    )
    return _debatch(out, src_nd)


def downscale_flow(flow: Tensor, factor: int) -> Tensor:
    """Resample a flow field to a grid `factor` times coarser.

    u and v are bilinearly downsampled (half-pixel-center convention,
    i.e. source coordinate (j + 0.5) * factor - 0.5, clamped at borders),
    then divided by `factor` so displacements stay in units of the
    target grid.
    """
    flow_b, nd = _batched(flow, "flow")
    n, c, h, w = flow_b.shape
    if c != 2:
        raise DataIntegrityError(f"flow must have 2 channels, got {c}")
    if factor < 1 or h % factor or w % factor:
        raise DataIntegrityError(f"factor {factor} does not divide flow size {(h, w)}")
    if factor == 1:
        return flow
    down = torch.nn.functional.interpolate(
        flow_b, size=(h // factor, w // factor), mode="bilinear", align_corners=False
    )
    return _debatch(down / factor, nd)


@dataclass
class PropagationState:
    """State carried along one clip between a key frame and the next.

    prop_feature is the feature propagated (and corrected) so far;
    prop_frame is the key frame warped through the same chain of flows, so
    its distortion mirrors the feature's. prev_frame is the actual previous
    video frame, which the flow network pairs with the incoming frame.
    """

    prop_feature: Tensor
    prop_frame: Tensor
    prev_frame: Tensor
    key_frame_index: int
    distance: int = 0


def start_state(feature: Tensor, frame: Tensor, key_index: int) -> PropagationState:
    return PropagationState(
        prop_feature=feature, prop_frame=frame, prev_frame=frame,
        key_frame_index=key_index, distance=0,
    )


def propagate_step(
    state: PropagationState, frame_next: Tensor, flownet, segnet_stride: int
) -> tuple[PropagationState, Tensor]:
    """Advance the propagation by one frame.

    Runs the flow network on (previous actual frame, next frame), warps the
    propagated frame with that flow and the propagated feature with its
    stride-scaled copy. Returns the new state and the image-resolution flow
    (the caller prices and reuses it).
    """
    if frame_next.shape[-2:] != state.prop_frame.shape[-2:]:
        raise DataIntegrityError(
            f"frame size {tuple(frame_next.shape[-2:])} does not match "
            f"propagation state {tuple(state.prop_frame.shape[-2:])}"
        )
    flow = flownet(state.prev_frame, frame_next)
    new_frame = warp_bilinear(state.prop_frame, flow)
    new_feature = warp_bilinear(state.prop_feature, downscale_flow(flow, segnet_stride))
    new_state = PropagationState(
        prop_feature=new_feature,
        prop_frame=new_frame,
        prev_frame=frame_next,
        key_frame_index=state.key_frame_index,
        distance=state.distance + 1,
    )
    return new_state, flow
