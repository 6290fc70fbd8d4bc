"""Checkpoint persistence: parameter blobs plus JSON manifest side files.

Each training stage owns a file named after it. A manifest records the
stage, seed, epoch count, a hash of the network-building config, and every
parameter shape; later stages refuse checkpoints whose hash disagrees with
the current config.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import torch

from .errors import ConfigError, MissingPrerequisiteError
from .networks import Networks

STAGE_ORDER = ("segnet", "flow-pretrain", "dmnet", "joint")
STAGE_NETS = {
    "segnet": ("segnet",),
    "flow-pretrain": ("flownet",),
    "dmnet": ("dmnet",),
    "joint": ("flownet", "cfnet"),
}
STAGE_REQUIRES = {
    "segnet": (),
    "flow-pretrain": ("segnet",),
    "dmnet": ("segnet", "flow-pretrain"),
    "joint": ("segnet", "flow-pretrain", "dmnet"),
}


def checkpoint_path(ckpt_dir: str | Path, stage: str) -> Path:
    return Path(ckpt_dir) / f"{stage}.pt"


def manifest_path(ckpt_dir: str | Path, stage: str) -> Path:
    return Path(ckpt_dir) / f"{stage}.json"


def save_stage(
    ckpt_dir: str | Path,
    stage: str,
    nets: Networks,
    seed: int,
    network_hash: str,
    epoch: int,
    summary: Optional[dict] = None,
) -> Path:
    if stage not in STAGE_NETS:
        raise ConfigError(f"unknown stage {stage!r}")
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    named = nets.named()
    blobs = {name: named[name].state_dict() for name in STAGE_NETS[stage]}
    path = checkpoint_path(ckpt_dir, stage)
    torch.save(blobs, path)
    manifest = {
        "stage": stage,
        "seed": seed,
        "network_hash": network_hash,
        "epoch": epoch,
        "parameter_shapes": {
            net: {k: list(v.shape) for k, v in sd.items()} for net, sd in blobs.items()
        },
        "summary": summary or {},
    }
    manifest_path(ckpt_dir, stage).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(ckpt_dir: str | Path, stage: str) -> dict:
    p = manifest_path(ckpt_dir, stage)
    if not p.is_file():
        raise MissingPrerequisiteError(f"missing checkpoint manifest for stage {stage!r}: {p}")
    return json.loads(p.read_text())


def require_stages(ckpt_dir: str | Path, stages: tuple[str, ...], network_hash: Optional[str]) -> None:
    missing = [s for s in stages if not checkpoint_path(ckpt_dir, s).is_file()]
    if missing:
        raise MissingPrerequisiteError(
            f"missing prerequisite checkpoint(s) {missing} under {ckpt_dir}; "
            f"train stages in order {' -> '.join(STAGE_ORDER)}"
        )
    if network_hash is not None:
        for s in stages:
            recorded = read_manifest(ckpt_dir, s).get("network_hash")
            if recorded != network_hash:
                raise ConfigError(
                    f"checkpoint {s!r} was built with network hash {recorded}, "
                    f"current config hashes to {network_hash}"
                )


def load_stage(ckpt_dir: str | Path, stage: str, nets: Networks,
               network_hash: Optional[str] = None) -> None:
    """Load one stage's parameter blobs into the matching networks."""
    path = checkpoint_path(ckpt_dir, stage)
    if not path.is_file():
        raise MissingPrerequisiteError(f"missing checkpoint for stage {stage!r}: {path}")
    require_stages(ckpt_dir, (stage,), network_hash)
    blobs = torch.load(path, weights_only=True)
    named = nets.named()
    for net_name, state in blobs.items():
        named[net_name].load_state_dict(state)


def load_pipeline(ckpt_dir: str | Path, nets: Networks,
                  network_hash: Optional[str] = None) -> None:
    """Load the full inference pipeline (segnet, dmnet, joint flownet+cfnet)."""
    require_stages(ckpt_dir, ("segnet", "dmnet", "joint"), network_hash)
    for stage in ("segnet", "dmnet", "joint"):
        load_stage(ckpt_dir, stage, nets, network_hash)
