"""Clip loading: on-disk layout -> in-memory VideoClip.

Layout per clip (indices are zero-based, %06d):
    <root>/clips/<clip_id>/frames/000000.png      8-bit RGB
    <root>/clips/<clip_id>/labels/000019.png      8-bit class index, 255 = ignore
    <root>/clips/<clip_id>/flows/000000.flo       backward flow of pair (t, t+1)
    <root>/clips/<clip_id>/occlusion/000000.png   0/255, pixels of t+1 with no source in t
    <root>/manifest.json

Labels may be sparse (any subset of frames). Flows and occlusion masks,
when the directories are non-empty, must cover every adjacent pair in the
loaded range.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from ..errors import DataIntegrityError
from .flo import read_flo

_INDEX_RE = re.compile(r"^(\d{6})\.(png|flo)$")


@dataclass
class VideoClip:
    """One scene: normalized frames plus whatever ground truth exists.

    frames are (N, 3, H, W) float32, already (x/255 - mean)/std normalized.
    labels/gt_flows/occlusion are keyed by frame index; the flow at key t
    maps frame t+1 pixels back into frame t (see flowseg.propagation).
    """

    clip_id: str
    frames: torch.Tensor
    labels: dict[int, torch.Tensor] = field(default_factory=dict)
    gt_flows: dict[int, torch.Tensor] = field(default_factory=dict)
    occlusion: dict[int, torch.Tensor] = field(default_factory=dict)
    num_classes: int = 0
    ignore_index: int = 255
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __post_init__(self):
        n = len(self.frames)
        if any(not (0 <= i < n) for i in self.labels):
            raise DataIntegrityError(f"{self.clip_id}: labeled index out of range")
        if any(not (0 <= i < n - 1) for i in self.gt_flows):
            raise DataIntegrityError(f"{self.clip_id}: flow index out of range")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def frame_size(self) -> tuple[int, int]:
        return tuple(self.frames.shape[-2:])

    def denormalize(self, frame: torch.Tensor) -> torch.Tensor:
        """Back to [0, 1] intensity."""
        mean = torch.tensor(self.mean, dtype=frame.dtype).view(3, 1, 1)
        std = torch.tensor(self.std, dtype=frame.dtype).view(3, 1, 1)
        return frame * std + mean

    def subclip(self, start: int, stop: int) -> "VideoClip":
        """View of frames [start, stop) with re-indexed ground truth."""
        if not (0 <= start < stop <= len(self)):
            raise DataIntegrityError(f"{self.clip_id}: bad subclip range [{start}, {stop})")
        return VideoClip(
            clip_id=f"{self.clip_id}[{start}:{stop}]",
            frames=self.frames[start:stop],
            labels={i - start: v for i, v in self.labels.items() if start <= i < stop},
            gt_flows={i - start: v for i, v in self.gt_flows.items() if start <= i < stop - 1},
            occlusion={i - start: v for i, v in self.occlusion.items() if start <= i < stop - 1},
            num_classes=self.num_classes,
            ignore_index=self.ignore_index,
            mean=self.mean,
            std=self.std,
        )


def _indexed_files(directory: Path) -> dict[int, Path]:
    if not directory.is_dir():
        return {}
    out = {}
    for p in sorted(directory.iterdir()):
        m = _INDEX_RE.match(p.name)
        if m:
            out[int(m.group(1))] = p
    return out


def _find_manifest(clip_dir: Path) -> Optional[dict]:
    for candidate in (clip_dir.parent.parent / "manifest.json", clip_dir.parent / "manifest.json"):
        if candidate.is_file():
            return json.loads(candidate.read_text())
    return None


def load_clip(
    path: str | Path,
    frame_range: Optional[tuple[int, int]] = None,
    mean: Optional[tuple] = None,
    std: Optional[tuple] = None,
    num_classes: Optional[int] = None,
    ignore_index: Optional[int] = None,
) -> VideoClip:
    """Load one clip directory. Normalization defaults come from the dataset
    manifest when one is found above the clip, else (0.5, 0.5, 0.5)."""
    clip_dir = Path(path)
    frames_dir = clip_dir / "frames"
    frame_files = _indexed_files(frames_dir)
    if not frame_files:
        raise DataIntegrityError(f"no frames found under {frames_dir}")

    manifest = _find_manifest(clip_dir) or {}
    norm = manifest.get("normalization", {})
    mean = tuple(mean if mean is not None else norm.get("mean", (0.5, 0.5, 0.5)))
    std = tuple(std if std is not None else norm.get("std", (0.5, 0.5, 0.5)))
    num_classes = num_classes if num_classes is not None else manifest.get("num_classes", 0)
    ignore_index = ignore_index if ignore_index is not None else manifest.get("ignore_index", 255)

    if frame_range is None:
        frame_range = (0, max(frame_files) + 1)
    start, stop = frame_range
    indices = list(range(start, stop))
    missing = [i for i in indices if i not in frame_files]
    if missing:
        raise DataIntegrityError(
            f"{clip_dir.name}: missing frames {[f'{i:06d}.png' for i in missing[:4]]} in range [{start}, {stop})"
        )

    mean_arr = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    std_arr = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
    frames = []
    size = None
    for i in indices:
        arr = np.asarray(Image.open(frame_files[i]).convert("RGB"), dtype=np.float32)
        arr = arr.transpose(2, 0, 1) / 255.0
        if size is None:
            size = arr.shape[1:]
        elif arr.shape[1:] != size:
            raise DataIntegrityError(f"{clip_dir.name}: frame {i} size {arr.shape[1:]} != {size}")
        frames.append((arr - mean_arr) / std_arr)
    frames_t = torch.from_numpy(np.stack(frames))

    labels = {}
    for i, p in _indexed_files(clip_dir / "labels").items():
        if i not in indices:
            continue
        lab = np.asarray(Image.open(p), dtype=np.int64)
        if lab.shape != size:
            raise DataIntegrityError(f"{clip_dir.name}: label {i} size {lab.shape} != frame size {size}")
        bad = (lab != ignore_index) & (lab >= max(num_classes, 1)) if num_classes else None
        if bad is not None and bad.any():
            raise DataIntegrityError(f"{clip_dir.name}: label {i} has values outside [0, {num_classes})")
        labels[i - start] = torch.from_numpy(lab)

    flow_files = _indexed_files(clip_dir / "flows")
    gt_flows = {}
    if flow_files:
        for t in range(start, stop - 1):
            if t not in flow_files:
                raise DataIntegrityError(f"{clip_dir.name}: missing flow {t:06d}.flo")
            flow = read_flo(flow_files[t])
            if flow.shape[1:] != size:
                raise DataIntegrityError(f"{clip_dir.name}: flow {t} size {flow.shape[1:]} != {size}")
            gt_flows[t - start] = torch.from_numpy(flow)

    occ_files = _indexed_files(clip_dir / "occlusion")
    occlusion = {}
    if occ_files:
        for t in range(start, stop - 1):
            if t not in occ_files:
                raise DataIntegrityError(f"{clip_dir.name}: missing occlusion mask {t:06d}.png")
            occ = np.asarray(Image.open(occ_files[t]), dtype=np.uint8)
            occlusion[t - start] = torch.from_numpy(occ > 127)

    return VideoClip(
        clip_id=clip_dir.name,
        frames=frames_t,
        labels=labels,
        gt_flows=gt_flows,
        occlusion=occlusion,
        num_classes=num_classes,
        ignore_index=ignore_index,
        mean=mean,
        std=std,
    )


class SegDataset:
    """A generated (or hand-laid-out) dataset root with a manifest."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.is_file():
            raise DataIntegrityError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        self.num_classes = int(self.manifest["num_classes"])
        self.ignore_index = int(self.manifest.get("ignore_index", 255))
        norm = self.manifest.get("normalization", {})
        self.mean = tuple(norm.get("mean", (0.5, 0.5, 0.5)))
        self.std = tuple(norm.get("std", (0.5, 0.5, 0.5)))
        self._cache: dict[str, VideoClip] = {}

    def clip_ids(self, split: Optional[str] = None) -> list[str]:
        return [
            c["id"]
            for c in self.manifest["clips"]
            if split is None or c.get("split", "train") == split
        ]

    def load(self, clip_id: str, frame_range: Optional[tuple[int, int]] = None) -> VideoClip:
        key = f"{clip_id}:{frame_range}"
        if key not in self._cache:
            self._cache[key] = load_clip(
                self.root / "clips" / clip_id,
                frame_range=frame_range,
                mean=self.mean,
                std=self.std,
                num_classes=self.num_classes,
                ignore_index=self.ignore_index,
            )
        return self._cache[key]

    def load_split(self, split: str) -> list[VideoClip]:
        return [self.load(cid) for cid in self.clip_ids(split)]
