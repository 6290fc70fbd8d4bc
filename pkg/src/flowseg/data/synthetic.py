"""Deterministic synthetic video scenes with exact ground truth.

A scene is a textured static background, a handful of textured shapes
(ellipses and boxes) translating with constant integer velocity, and a
static occluder strip drawn on top of everything. Because velocities are
integers and textures ride with the shapes, every non-occluded pixel of
frame t+1 is a byte-exact copy of its source pixel in frame t, which makes
the stored backward flow exact and the occlusion masks unambiguous.

Stored flow convention (shared with flowseg.propagation): the flow of the
pair (t, t+1) lives on frame t+1's pixel grid and points to each pixel's
source in frame t, i.e. flow(p) = source - p = -velocity inside a shape
that moves by +velocity. The occlusion mask of the pair marks pixels of
frame t+1 with no source in frame t (newly revealed content).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..config import SynthSpec
from ..errors import DataIntegrityError
from .flo import write_flo

OCCLUDER_INSTANCE = 10_000

_SHAPE_COLORS = [
    (0.80, 0.25, 0.20),
    (0.20, 0.35, 0.85),
    (0.20, 0.75, 0.35),
    (0.70, 0.30, 0.75),
    (0.85, 0.55, 0.15),
    (0.15, 0.70, 0.70),
]


def _smooth_noise(rng: np.random.Generator, h: int, w: int, amplitude: float) -> np.ndarray:
    """Band-limited texture: coarse noise bilinearly upsampled to (3, h, w).

    Smooth texture keeps sub-pixel warps close to the original signal, so
    image-space comparison stays informative about genuine distortion
    instead of reacting to resampled per-pixel noise.
    """
    gh = max(2, h // 8 + 1)
    gw = max(2, w // 8 + 1)
    coarse = rng.uniform(-1.0, 1.0, size=(3, gh, gw))
    up = torch.nn.functional.interpolate(
        torch.from_numpy(coarse)[None], size=(h, w), mode="bilinear", align_corners=True
    )[0].numpy()
    return up * amplitude


def class_palette(num_classes: int) -> np.ndarray:
    """Base color per class: 0 = background, last = occluder strip."""
    if num_classes < 3:
        raise DataIntegrityError("synthetic scenes need >= 3 classes (background, shape, occluder)")
    pal = np.zeros((num_classes, 3))
    pal[0] = (0.30, 0.32, 0.30)
    pal[num_classes - 1] = (0.90, 0.82, 0.25)
    for i in range(1, num_classes - 1):
        pal[i] = _SHAPE_COLORS[(i - 1) % len(_SHAPE_COLORS)]
    return pal


@dataclass
class _Shape:
    kind: str
    class_id: int
    instance_id: int
    start: tuple[int, int]      # (cy, cx) center at frame 0
    velocity: tuple[int, int]   # (vy, vx) pixels per frame
    mask: np.ndarray            # (bh, bw) bool
    texture: np.ndarray         # (3, bh, bw) float in [0, 1]

    def center(self, t: int) -> tuple[int, int]:
        return (self.start[0] + self.velocity[0] * t, self.start[1] + self.velocity[1] * t)

    def meta(self) -> dict:
        return {
            "kind": self.kind,
            "class_id": self.class_id,
            "instance_id": self.instance_id,
            "start": list(self.start),
            "velocity": list(self.velocity),
            "bbox": list(self.mask.shape),
        }


def _shape_geometry(kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "ellipse":
        ry = int(rng.integers(6, 13))
        rx = int(rng.integers(6, 13))
        yy, xx = np.mgrid[-ry : ry + 1, -rx : rx + 1]
        return (yy / ry) ** 2 + (xx / rx) ** 2 <= 1.0
    hy = int(rng.integers(5, 12))
    hx = int(rng.integers(5, 12))
    return np.ones((2 * hy + 1, 2 * hx + 1), dtype=bool)


def _fit_velocity(c0: int, v: int, frames: int, size: int) -> int:
    """Flip (or zero) a velocity component so the center stays in frame."""
    margin = 6
    end = c0 + v * (frames - 1)
    if margin <= end < size - margin:
        return v
    end = c0 - v * (frames - 1)
    if margin <= end < size - margin:
        return -v
    return 0


def _sample_shapes(spec: SynthSpec, rng: np.random.Generator, palette: np.ndarray) -> list[_Shape]:
    shapes = []
    shape_classes = list(range(1, spec.num_classes - 1))
    for i in range(spec.num_shapes):
        class_id = shape_classes[i % len(shape_classes)]
        kind = "ellipse" if class_id % 2 == 1 else "box"
        mask = _shape_geometry(kind, rng)
        cy = int(rng.integers(10, spec.height - 10))
        cx = int(rng.integers(10, spec.width - 10))
        vel = []
        for c0, size in ((cy, spec.height), (cx, spec.width)):
            mag = int(rng.integers(spec.velocity_min, spec.velocity_max + 1))
            v = mag if rng.random() < 0.5 else -mag
            vel.append(_fit_velocity(c0, v, spec.frames_per_clip, size))
        noise = _smooth_noise(rng, *mask.shape, spec.texture_noise)
        texture = np.clip(palette[class_id][:, None, None] + noise, 0.0, 1.0)
        shapes.append(
            _Shape(kind, class_id, i + 1, (cy, cx), (vel[0], vel[1]), mask, texture)
        )
    return shapes


@dataclass
class _Scene:
    spec: SynthSpec
    background: np.ndarray          # (3, H, W)
    occluder_mask: np.ndarray       # (H, W) bool
    occluder_texture: np.ndarray    # (3, H, W)
    shapes: list[_Shape]

    def render(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Frame t as (image [0,1], label map, instance map)."""
        h, w = self.spec.height, self.spec.width
        img = self.background.copy()
        label = np.zeros((h, w), dtype=np.uint8)
        inst = np.zeros((h, w), dtype=np.int32)
        for s in self.shapes:
            cy, cx = s.center(t)
            bh, bw = s.mask.shape
            y0, x0 = cy - bh // 2, cx - bw // 2
            ys0, xs0 = max(0, y0), max(0, x0)
            ys1, xs1 = min(h, y0 + bh), min(w, x0 + bw)
            if ys0 >= ys1 or xs0 >= xs1:
                continue
            m = s.mask[ys0 - y0 : ys1 - y0, xs0 - x0 : xs1 - x0]
            tex = s.texture[:, ys0 - y0 : ys1 - y0, xs0 - x0 : xs1 - x0]
            region = img[:, ys0:ys1, xs0:xs1]
            region[:, m] = tex[:, m]
            label[ys0:ys1, xs0:xs1][m] = s.class_id
            inst[ys0:ys1, xs0:xs1][m] = s.instance_id
        img[:, self.occluder_mask] = self.occluder_texture[:, self.occluder_mask]
        label[self.occluder_mask] = self.spec.num_classes - 1
        inst[self.occluder_mask] = OCCLUDER_INSTANCE
        return img, label, inst

    def velocity_of(self, instance_id: int) -> tuple[int, int]:
        if instance_id == 0 or instance_id == OCCLUDER_INSTANCE:
            return (0, 0)
        return self.shapes[instance_id - 1].velocity

    def pair_ground_truth(
        self, inst_a: np.ndarray, inst_b: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backward flow and occlusion for a (t, t+1) pair, on t+1's grid."""
        h, w = inst_b.shape
        flow = np.zeros((2, h, w), dtype=np.float32)
        occ = np.zeros((h, w), dtype=bool)
        velocities = {0: (0, 0), OCCLUDER_INSTANCE: (0, 0)}
        for s in self.shapes:
            velocities[s.instance_id] = s.velocity
        for inst_id, (vy, vx) in velocities.items():
            where = inst_b == inst_id
            if not where.any():
                continue
            flow[0][where] = -vx
            flow[1][where] = -vy
            ys, xs = np.nonzero(where)
            sy, sx = ys - vy, xs - vx
            inside = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
            hidden = np.ones(len(ys), dtype=bool)
            hidden[inside] = inst_a[sy[inside], sx[inside]] != inst_id
            occ[ys[hidden], xs[hidden]] = True
        return flow, occ


def build_scene(spec: SynthSpec, rng: np.random.Generator) -> _Scene:
    palette = class_palette(spec.num_classes)
    bg_noise = _smooth_noise(rng, spec.height, spec.width, spec.texture_noise)
    background = np.clip(palette[0][:, None, None] + bg_noise, 0.0, 1.0)

    occ_mask = np.zeros((spec.height, spec.width), dtype=bool)
    if spec.occluder_width > 0:
        if rng.random() < 0.5:
            x0 = int(rng.integers(spec.width // 4, 3 * spec.width // 4 - spec.occluder_width + 1))
            occ_mask[:, x0 : x0 + spec.occluder_width] = True
        else:
            y0 = int(rng.integers(spec.height // 4, 3 * spec.height // 4 - spec.occluder_width + 1))
            occ_mask[y0 : y0 + spec.occluder_width, :] = True
    occ_noise = _smooth_noise(rng, spec.height, spec.width, spec.texture_noise)
    occ_texture = np.clip(palette[spec.num_classes - 1][:, None, None] + occ_noise, 0.0, 1.0)

    shapes = _sample_shapes(spec, rng, palette)
    return _Scene(spec, background, occ_mask, occ_texture, shapes)


def _save_png(path: Path, array: np.ndarray, mode: str) -> None:
    Image.fromarray(array, mode=mode).save(path)


def generate_clip(spec: SynthSpec, clip_index: int, clip_dir: Path) -> dict:
    """Render one clip to disk; returns its manifest entry."""
    rng = np.random.default_rng([spec.seed, clip_index])
    scene = build_scene(spec, rng)

    for sub in ("frames", "labels", "flows", "occlusion"):
        (clip_dir / sub).mkdir(parents=True, exist_ok=True)

    prev_inst = None
    for t in range(spec.frames_per_clip):
        img, label, inst = scene.render(t)
        img_u8 = np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)
        _save_png(clip_dir / "frames" / f"{t:06d}.png", img_u8, "RGB")
        _save_png(clip_dir / "labels" / f"{t:06d}.png", label, "L")
        if prev_inst is not None:
            flow, occ = scene.pair_ground_truth(prev_inst, inst)
            write_flo(clip_dir / "flows" / f"{t - 1:06d}.flo", flow)
            _save_png(clip_dir / "occlusion" / f"{t - 1:06d}.png", occ.astype(np.uint8) * 255, "L")
        prev_inst = inst

    meta = {
        "shapes": [s.meta() for s in scene.shapes],
        "occluder_width": spec.occluder_width,
    }
    (clip_dir / "scene.json").write_text(json.dumps(meta, indent=2) + "\n")
    return {"id": clip_dir.name, "num_frames": spec.frames_per_clip}


def generate_synthetic_dataset(
    spec: SynthSpec,
    out_path: str | Path,
    mean: list[float] | tuple = (0.5, 0.5, 0.5),
    std: list[float] | tuple = (0.5, 0.5, 0.5),
    force: bool = False,
) -> dict:
    """Write a full dataset (clips + manifest) under out_path.

    Regeneration with the same spec is byte-identical. Refuses to write
    into a non-empty directory unless force is set.
    """
    spec.validate()
    out = Path(out_path)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataIntegrityError(f"output directory {out} is not empty (use force to overwrite)")
    (out / "clips").mkdir(parents=True, exist_ok=True)

    n_val = min(round(spec.num_clips * spec.val_fraction), spec.num_clips - 1)
    n_train = spec.num_clips - n_val

    clips = []
    for i in range(spec.num_clips):
        clip_dir = out / "clips" / f"clip_{i:04d}"
        entry = generate_clip(spec, i, clip_dir)
        entry["split"] = "train" if i < n_train else "val"
        clips.append(entry)

    manifest = {
        "format_version": 1,
        "num_classes": spec.num_classes,
        "ignore_index": 255,
        "normalization": {"mean": list(mean), "std": list(std)},
        "frame_size": [spec.height, spec.width],
        "clips": clips,
        "synth": dataclasses.asdict(spec),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
