"""Experiment drivers: distance sweeps and report generation.

These tie checkpoints, inference, and metrics together for the CLI and the
acceptance suite. A "sweep" evaluates the validation split at every
requested propagation distance: for each clip the key frame is placed
`distance` frames before the evaluation frame, the pipeline runs the chain,
and the final-frame predictions accumulate into one confusion matrix per
distance. Rectification statistics aggregate over every evaluated frame.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import checkpoints
from .config import RunConfig
from .data.clips import SegDataset, VideoClip
from .errors import DataIntegrityError
from .evaluation import (
    ConfusionMatrix,
    CostModel,
    FalseCorrectionStats,
    build_cost_model,
    cca_curve,
    false_correction_stats,
    pda_curve,
    read_pda_csv,
    write_cca_csv,
    write_false_correction_csv,
    write_flops_json,
    write_pda_csv,
)
from .inference import MODES, run_distance_eval, schedule_keyframes, segment_clip, write_clip_predictions
from .networks import Networks, build_networks


def load_inference_nets(cfg: RunConfig, dataset: SegDataset, out_dir: str | Path) -> Networks:
    """Build networks from config and load the full trained pipeline."""
    nets = build_networks(cfg.networks, dataset.num_classes)
    checkpoints.load_pipeline(Path(out_dir) / "checkpoints", nets, cfg.network_hash())
    return nets.eval_all()


@dataclass
class SweepResult:
    mode: str
    miou_by_distance: dict[int, float] = field(default_factory=dict)
    per_class_by_distance: dict[int, list[float]] = field(default_factory=dict)
    false_correction: FalseCorrectionStats = field(default_factory=FalseCorrectionStats)

    @property
    def mean_miou(self) -> float:
        vals = list(self.miou_by_distance.values())
        return sum(vals) / len(vals)


def _eval_one(clip: VideoClip, nets: Networks, distance: int, mode: str,
              eval_frame: Optional[int]):
    result = run_distance_eval(clip, nets, distance, mode=mode, eval_index=eval_frame)
    gt = clip.labels[result.index]
    stats = None
    if result.prop_pred is not None and mode != "prop-only":
        stats = false_correction_stats(result.prop_pred, result.pred, gt, clip.ignore_index)
    return result.pred, gt, stats


def run_distance_sweep(
    dataset: SegDataset,
    nets: Networks,
    distances: list[int],
    mode: str = "full",
    split: str = "val",
    eval_frame: Optional[int] = None,
    jobs: int = 1,
) -> SweepResult:
    if mode not in MODES:
        raise DataIntegrityError(f"unknown sweep mode {mode!r}")
    clips = dataset.load_split(split)
    if not clips:
        raise DataIntegrityError(f"dataset has no clips in split {split!r}")
    out = SweepResult(mode=mode)
    for distance in distances:
        cm = ConfusionMatrix(dataset.num_classes, dataset.ignore_index)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(
                    lambda clip: _eval_one(clip, nets, distance, mode, eval_frame), clips
                ))
        else:
            rows = [_eval_one(clip, nets, distance, mode, eval_frame) for clip in clips]
        for pred, gt, stats in rows:
            cm.update(pred, gt)
            if stats is not None:
                out.false_correction.merge(stats)
        mean, per_class = cm.iou()
        out.miou_by_distance[distance] = mean
        out.per_class_by_distance[distance] = per_class
    return out


def eval_pda(dataset: SegDataset, nets: Networks, eval_dir: Path, distances: list[int],
             eval_frame: Optional[int] = None, jobs: int = 1) -> dict[str, SweepResult]:
    """Distance/accuracy sweep of the full method and the propagation-only
    baseline; writes pda.csv and pda_prop_only.csv."""
    eval_dir.mkdir(parents=True, exist_ok=True)
    sweeps = {}
    for mode, fname in (("full", "pda.csv"), ("prop-only", "pda_prop_only.csv")):
        sweep = run_distance_sweep(dataset, nets, distances, mode=mode,
                                   eval_frame=eval_frame, jobs=jobs)
        curve = pda_curve(sweep.miou_by_distance, label=mode, distances=distances)
        write_pda_csv(eval_dir / fname, curve,
                      {d: v for d, v in sweep.per_class_by_distance.items()})
        sweeps[mode] = sweep
    return sweeps


def eval_cca(dataset: SegDataset, nets: Networks, eval_dir: Path,
             distances: list[int]) -> CostModel:
    """Reprice pda.csv into cca.csv using the traced cost model."""
    miou_by_distance = read_pda_csv(eval_dir / "pda.csv")
    missing = [d for d in distances if d not in miou_by_distance]
    if missing:
        raise DataIntegrityError(
            f"pda.csv lacks distances {missing}; run `eval pda` for them first"
        )
    h, w = dataset.manifest["frame_size"]
    model = build_cost_model(nets, (h, w))
    curve = pda_curve(miou_by_distance, distances=distances)
    cca = cca_curve(curve, model)
    write_cca_csv(eval_dir / "cca.csv", distances, cca)
    return model


def eval_false_correction(dataset: SegDataset, nets: Networks, eval_dir: Path,
                          distances: list[int], eval_frame: Optional[int] = None,
                          jobs: int = 1) -> dict[str, FalseCorrectionStats]:
    """Aggregate rectification statistics of guided vs constant-map fusion."""
    eval_dir.mkdir(parents=True, exist_ok=True)
    stats = {}
    for mode in ("full", "naive"):
        sweep = run_distance_sweep(dataset, nets, distances, mode=mode,
                                   eval_frame=eval_frame, jobs=jobs)
        stats[mode] = sweep.false_correction
    write_false_correction_csv(eval_dir / "false_correction.csv", stats)
    return stats


def eval_flops(dataset: SegDataset, nets: Networks, eval_dir: Path) -> CostModel:
    eval_dir.mkdir(parents=True, exist_ok=True)
    h, w = dataset.manifest["frame_size"]
    model = build_cost_model(nets, (h, w))
    write_flops_json(eval_dir / "flops.json", model)
    return model


def eval_upper_bound(dataset: SegDataset, nets: Networks, eval_dir: Path,
                     distances: list[int], eval_frame: Optional[int] = None,
                     jobs: int = 1) -> dict[str, SweepResult]:
    """Oracle-guided sweep next to the predicted-map sweep (pda_oracle.csv)."""
    eval_dir.mkdir(parents=True, exist_ok=True)
    oracle = run_distance_sweep(dataset, nets, distances, mode="oracle",
                                eval_frame=eval_frame, jobs=jobs)
    write_pda_csv(eval_dir / "pda_oracle.csv",
                  pda_curve(oracle.miou_by_distance, label="oracle", distances=distances),
                  oracle.per_class_by_distance)
    pda_file = eval_dir / "pda.csv"
    full = None
    if pda_file.is_file():
        recorded = read_pda_csv(pda_file)
        if all(d in recorded for d in distances):
            full = SweepResult(mode="full",
                               miou_by_distance={d: recorded[d] for d in distances})
    if full is None:
        full = run_distance_sweep(dataset, nets, distances, mode="full",
                                  eval_frame=eval_frame, jobs=jobs)
    return {"oracle": oracle, "full": full}


def infer_clips(
    dataset: SegDataset,
    nets: Networks,
    out_root: Path,
    clip_ids: list[str],
    interval: int,
    mode: str = "full",
    emit_intermediates: bool = False,
    jobs: int = 1,
) -> None:
    """Scheduled whole-clip inference with predictions written to disk."""

    def one(clip_id: str) -> None:
        clip = dataset.load(clip_id)
        schedule = schedule_keyframes(len(clip), interval)
        results = segment_clip(clip, nets, schedule, mode=mode,
                               keep_maps=emit_intermediates)
        write_clip_predictions(out_root, clip_id, results, emit_intermediates)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(one, clip_ids))
    else:
        for cid in clip_ids:
            one(cid)
