"""Loss algebra, dual supervision, and the four-stage training pipeline.

Stages run in a fixed order, each freezing everything the previous ones
produced:
    segnet         per-frame segmentation (backbone + shared head)
    flow-pretrain  flow network against stored ground-truth flow (mean
                   endpoint error over adjacent pairs, plus a few
                   identical-frame pairs so static content maps to zero)
    dmnet          distortion predictor against disagreement (XOR) maps
                   generated with the frozen segmenter and pretrained flow
    joint          flow network finetuned together with the freshly
                   initialized cue network under dual supervision;
                   segmenter and distortion net stay byte-frozen

Dual supervision runs every triplet as two chained warps: the key frame's
feature is warped to the intermediate frame, corrected, supervised against
that frame's pseudo label, then the corrected feature is warped on to the
final frame and supervised against the true label. Adjacent (degenerate)
triplets collapse to the single-warp leg.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from . import checkpoints
from .config import ABLATIONS, RunConfig, StageConfig
from .correction import fuse_features, weighted_cross_entropy
from .data.clips import SegDataset, VideoClip
from .data.sampling import hflip_flow, hflip_frame, sample_dmnet_pair, sample_training_triplet
from .distortion import distortion_ground_truth, dmnet_loss, predict_distortion
from .errors import ConfigError, DataIntegrityError
from .evaluation import ConfusionMatrix, average_precision
from .networks import FEATURE_STRIDE, Networks, build_networks, params_digest, upsample_logits
from .propagation import downscale_flow, warp_bilinear

_STAGE_SEED_OFFSET = {"segnet": 11, "flow-pretrain": 22, "dmnet": 33, "joint": 44}


# ---------------------------------------------------------------------------
# Loss algebra
# ---------------------------------------------------------------------------


def propagation_loss(logits_p: Tensor, labels: Tensor, ignore_index: int = 255) -> Tensor:
    """Unweighted cross-entropy on the propagated feature's logits."""
    single = logits_p.ndim == 3
    lo = logits_p[None] if single else logits_p
    la = labels[None] if single else labels
    return weighted_cross_entropy(lo, la, None, ignore_index).mean()


def correction_loss(logits_c: Tensor, labels: Tensor, ignore_index: int = 255) -> Tensor:
    """Same form as propagation_loss, applied to the corrected feature."""
    return propagation_loss(logits_c, labels, ignore_index)


def frame_loss(l_p: Tensor | float, l_c: Tensor | float, l_dgfl: Tensor | float):
    """Per-frame objective: plain mean of the three supervision terms."""
    return (l_p + l_c + l_dgfl) / 3


def pseudo_label(frame: Tensor, segnet) -> Tensor:
    """Class argmax of the segmenter at label resolution; never ignored."""
    with torch.no_grad():
        single = frame.ndim == 3
        x = frame[None] if single else frame
        _, logits = segnet(x)
        up = upsample_logits(logits, x.shape[-2:])
        out = up.argmax(1)
    return out[0] if single else out


@dataclass
class LossBundle:
    """Batch-mean supervision terms of one frame (missing when ablated)."""

    l_p: float
    l_c: Optional[float] = None
    l_dgfl: Optional[float] = None

    @property
    def total(self) -> float:
        parts = [x for x in (self.l_p, self.l_c, self.l_dgfl) if x is not None]
        return sum(parts) / len(parts)


def _supervision_leg(
    nets: Networks,
    f_prop: Tensor,
    frame_prop: Tensor,
    frame_cur: Tensor,
    cue: Optional[Tensor],
    target: Tensor,
    ignore_index: int,
    ablation: str,
) -> tuple[Tensor, Optional[Tensor], Optional[Tensor], Tensor]:
    """One supervised frame: per-sample losses and the feature to carry on.

    f_prop (B,C,h,w) is the warped (grad-carrying) feature, frame_prop the
    grad-free propagated frame, cue the precomputed correction cue (None
    when the correction module is ablated away). Returns
    (l_p, l_c, l_dgfl, carried), each loss of shape (B,).
    """
    full_size = frame_cur.shape[-2:]
    logits_p = upsample_logits(nets.segnet.head_logits(f_prop), full_size)
    l_p = weighted_cross_entropy(logits_p, target, None, ignore_index)
    if cue is None:
        return l_p, None, None, f_prop

    with torch.no_grad():
        m_pred = predict_distortion(frame_prop, frame_cur, nets.dmnet)
    fuse_map = torch.full_like(m_pred, 0.5) if ablation == "no-dgfc" else m_pred
    corrected = fuse_features(f_prop, cue, fuse_map)

    logits_c = upsample_logits(nets.segnet.head_logits(corrected), full_size)
    l_c = weighted_cross_entropy(logits_c, target, None, ignore_index)

    logits_cue = upsample_logits(nets.segnet.head_logits(cue), full_size)
    if ablation == "no-dgfl":
        l_dgfl = weighted_cross_entropy(logits_cue, target, None, ignore_index)
    else:
        m_up = upsample_logits(m_pred, full_size).squeeze(1)
        l_dgfl = weighted_cross_entropy(logits_cue, target, m_up, ignore_index)
    return l_p, l_c, l_dgfl, corrected


@dataclass
class DDSResult:
    total: Tensor                       # optimization objective (scalar)
    f2: Optional[LossBundle]
    f3: LossBundle
    frames_supervised: int


def dds_forward(
    nets: Networks,
    frames1: Tensor,
    frames2: Optional[Tensor],
    frames3: Tensor,
    gt3: Tensor,
    ignore_index: int = 255,
    ablation: str = "none",
) -> DDSResult:
    """Dual-deep-supervision objective for a batch of triplets.

    frames2 = None runs the degenerate single-warp protocol (also used by
    the no-dds ablation). The returned total is the mean of the per-frame
    objectives over every supervised frame in the batch.
    """
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    with torch.no_grad():
        feat_key = nets.segnet.features(frames1)

    def bundle(per_sample: tuple) -> LossBundle:
        l_p, l_c, l_dgfl = per_sample
        return LossBundle(
            l_p=float(l_p.detach().mean()),
            l_c=None if l_c is None else float(l_c.detach().mean()),
            l_dgfl=None if l_dgfl is None else float(l_dgfl.detach().mean()),
        )

    def frame_objective(l_p, l_c, l_dgfl) -> Tensor:
        if l_c is None:
            return l_p
        return (l_p + l_c + l_dgfl) / 3

    use_fcm = ablation != "no-fcm"
    if frames2 is None:
        flow = nets.flownet(frames1, frames3)
        f_prop = warp_bilinear(feat_key, downscale_flow(flow, FEATURE_STRIDE))
        with torch.no_grad():
            frame_prop = warp_bilinear(frames1, flow.detach())
        cue3 = nets.cfnet(frames3) if use_fcm else None
        l_p, l_c, l_dgfl, _ = _supervision_leg(
            nets, f_prop, frame_prop, frames3, cue3, gt3, ignore_index, ablation
        )
        total = frame_objective(l_p, l_c, l_dgfl).mean()
        return DDSResult(total=total, f2=None, f3=bundle((l_p, l_c, l_dgfl)),
                         frames_supervised=len(frames3))

    # one cue-network call for both supervised frames (better statistics, and
    # the stride-64 bottleneck needs more than one element per channel)
    cue2 = cue3 = None
    if use_fcm:
        cues = nets.cfnet(torch.cat([frames2, frames3]))
        cue2, cue3 = cues[: len(frames2)], cues[len(frames2):]

    pseudo2 = pseudo_label(frames2, nets.segnet)
    flow12 = nets.flownet(frames1, frames2)
    f_prop2 = warp_bilinear(feat_key, downscale_flow(flow12, FEATURE_STRIDE))
    with torch.no_grad():
        frame_prop2 = warp_bilinear(frames1, flow12.detach())
    l_p2, l_c2, l_dgfl2, carried = _supervision_leg(
        nets, f_prop2, frame_prop2, frames2, cue2, pseudo2, ignore_index, ablation
    )

    flow23 = nets.flownet(frames2, frames3)
    f_prop3 = warp_bilinear(carried, downscale_flow(flow23, FEATURE_STRIDE))
    with torch.no_grad():
        frame_prop3 = warp_bilinear(frame_prop2, flow23.detach())
    l_p3, l_c3, l_dgfl3, _ = _supervision_leg(
        nets, f_prop3, frame_prop3, frames3, cue3, gt3, ignore_index, ablation
    )

    per2 = frame_objective(l_p2, l_c2, l_dgfl2)
    per3 = frame_objective(l_p3, l_c3, l_dgfl3)
    total = torch.cat([per2, per3]).mean()
    return DDSResult(total=total, f2=bundle((l_p2, l_c2, l_dgfl2)),
                     f3=bundle((l_p3, l_c3, l_dgfl3)),
                     frames_supervised=2 * len(frames3))


# ---------------------------------------------------------------------------
# Stage machinery
# ---------------------------------------------------------------------------


class MetricsCSV:
    def __init__(self, path: str | Path, header: list[str]):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")
        self._f.write(",".join(header) + "\n")

    def row(self, values: list) -> None:
        cells = []
        for v in values:
            if v is None:
                cells.append("")
            elif isinstance(v, float):
                cells.append(f"{v:.6f}")
            else:
                cells.append(str(v))
        self._f.write(",".join(cells) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


@dataclass
class StageResult:
    stage: str
    steps: int
    checkpoint: Path
    metrics_csv: Path
    summary: dict


def _freeze(module: torch.nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def _epoch_lrs(cfg: StageConfig) -> list[float]:
    return [cfg.lr_high] * cfg.epochs_high + [cfg.lr_low] * cfg.epochs_low


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _stack_frames(clips: list[VideoClip], picks: list[tuple[int, int]]) -> Tensor:
    return torch.stack([clips[ci].frames[fi] for ci, fi in picks])


def _train_val_clips(dataset: SegDataset) -> tuple[list[VideoClip], list[VideoClip]]:
    train = dataset.load_split("train")
    val = dataset.load_split("val")
    if not train:
        raise DataIntegrityError("dataset has no training clips")
    return train, val


# ---------------------------------------------------------------------------
# Stage: segnet
# ---------------------------------------------------------------------------


def _train_segnet(dataset: SegDataset, nets: Networks, cfg: RunConfig,
                  log_path: Path) -> tuple[int, dict]:
    stage_cfg = cfg.train.segnet
    train_clips, val_clips = _train_val_clips(dataset)
    samples = [(ci, fi) for ci, clip in enumerate(train_clips) for fi in sorted(clip.labels)]
    if not samples:
        raise DataIntegrityError("no labeled frames in the training split")
    rng = np.random.default_rng([cfg.seed, _STAGE_SEED_OFFSET["segnet"]])
    aug = cfg.data.augment

    opt = torch.optim.Adam(nets.segnet.parameters(), lr=stage_cfg.lr_high,
                           betas=(cfg.train.adam_beta1, cfg.train.adam_beta2))
    log = MetricsCSV(log_path, ["step", "loss", "lr"])
    nets.segnet.train()
    step = 0
    for lr in _epoch_lrs(stage_cfg):
        _set_lr(opt, lr)
        order = rng.permutation(len(samples))
        for lo in range(0, len(order), stage_cfg.batch_size):
            picks = [samples[i] for i in order[lo : lo + stage_cfg.batch_size]]
            frames = _stack_frames(train_clips, picks)
            labels = torch.stack([train_clips[ci].labels[fi] for ci, fi in picks])
            if aug.hflip and rng.random() < 0.5:
                frames = hflip_frame(frames)
                labels = hflip_frame(labels)
            if aug.crop_size is not None and aug.crop_size < frames.shape[-1]:
                c = aug.crop_size
                top = int(rng.integers(0, frames.shape[-2] - c + 1))
                left = int(rng.integers(0, frames.shape[-1] - c + 1))
                frames = frames[..., top : top + c, left : left + c]
                labels = labels[..., top : top + c, left : left + c]
            _, logits = nets.segnet(frames)
            up = upsample_logits(logits, labels.shape[-2:])
            loss = weighted_cross_entropy(up, labels, None, dataset.ignore_index).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.row([step, float(loss.detach()), lr])
            step += 1
    log.close()

    nets.segnet.eval()
    cm = ConfusionMatrix(dataset.num_classes, dataset.ignore_index)
    agree = total = 0
    with torch.no_grad():
        for clip in val_clips or train_clips:
            for fi, gt in clip.labels.items():
                _, logits = nets.segnet(clip.frames[fi])
                pred = upsample_logits(logits, gt.shape).argmax(0)
                cm.update(pred, gt)
                valid = gt != dataset.ignore_index
                agree += int((pred[valid] == gt[valid]).sum())
                total += int(valid.sum())
    val_miou, per_class = cm.iou()
    return step, {
        "val_miou": val_miou,
        "val_per_class_iou": per_class,
        # pseudo-labels are this model's argmaxes; their agreement with the
        # true labels is the pseudo-label accuracy the later stages inherit
        "pseudo_label_val_accuracy": agree / max(total, 1),
    }


# ---------------------------------------------------------------------------
# Stage: flow-pretrain
# ---------------------------------------------------------------------------


def _epe(pred: Tensor, gt: Tensor) -> Tensor:
    return (pred - gt).norm(dim=-3).mean(dim=(-2, -1))


def _train_flow(dataset: SegDataset, nets: Networks, cfg: RunConfig,
                log_path: Path) -> tuple[int, dict]:
    stage_cfg = cfg.train.flow_pretrain
    train_clips, val_clips = _train_val_clips(dataset)
    pairs = [(ci, t) for ci, clip in enumerate(train_clips) for t in range(len(clip) - 1)]
    if not pairs:
        raise DataIntegrityError("no adjacent frame pairs with ground-truth flow")
    for clip in train_clips:
        if not clip.gt_flows:
            raise DataIntegrityError(f"{clip.clip_id}: flow pretraining needs stored flows")
    rng = np.random.default_rng([cfg.seed, _STAGE_SEED_OFFSET["flow-pretrain"]])

    opt = torch.optim.Adam(nets.flownet.parameters(), lr=stage_cfg.lr_high,
                           betas=(cfg.train.adam_beta1, cfg.train.adam_beta2))
    log = MetricsCSV(log_path, ["step", "epe", "lr"])
    nets.flownet.train()
    step = 0
    for lr in _epoch_lrs(stage_cfg):
        _set_lr(opt, lr)
        order = rng.permutation(len(pairs))
        for lo in range(0, len(order), stage_cfg.batch_size):
            batch_a, batch_b, batch_gt = [], [], []
            for i in order[lo : lo + stage_cfg.batch_size]:
                ci, t = pairs[i]
                clip = train_clips[ci]
                if rng.random() < stage_cfg.static_pair_fraction:
                    frame = clip.frames[t]
                    a, b = frame, frame
                    gt = torch.zeros_like(clip.gt_flows[t])
                else:
                    a, b, gt = clip.frames[t], clip.frames[t + 1], clip.gt_flows[t]
                if cfg.data.augment.hflip and rng.random() < 0.5:
                    a, b, gt = hflip_frame(a), hflip_frame(b), hflip_flow(gt)
                batch_a.append(a)
                batch_b.append(b)
                batch_gt.append(gt)
            pred = nets.flownet(torch.stack(batch_a), torch.stack(batch_b))
            loss = _epe(pred, torch.stack(batch_gt)).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.row([step, float(loss.detach()), lr])
            step += 1
    log.close()

    nets.flownet.eval()
    epes, static_means = [], []
    with torch.no_grad():
        for clip in val_clips or train_clips:
            for t in range(len(clip) - 1):
                pred = nets.flownet(clip.frames[t], clip.frames[t + 1])
                epes.append(float(_epe(pred[None], clip.gt_flows[t][None])))
            static = nets.flownet(clip.frames[0], clip.frames[0])
            static_means.append(float(static.abs().mean()))
    return step, {
        "val_epe": float(np.mean(epes)),
        "static_mean_abs_flow": float(np.mean(static_means)),
    }


# ---------------------------------------------------------------------------
# Stage: dmnet
# ---------------------------------------------------------------------------


def _dmnet_batch_targets(nets: Networks, frames_a: Tensor, frames_b: Tensor):
    """Propagated frame plus binary disagreement target, all grad-free."""
    with torch.no_grad():
        feat = nets.segnet.features(frames_a)
        flow = nets.flownet(frames_a, frames_b)
        f_prop = warp_bilinear(feat, downscale_flow(flow, FEATURE_STRIDE))
        frame_prop = warp_bilinear(frames_a, flow)
        seg_prop = nets.segnet.head_logits(f_prop).argmax(1)
        seg_cur = nets.segnet(frames_b)[1].argmax(1)
        m_gt = distortion_ground_truth(seg_prop, seg_cur)
    return frame_prop, m_gt


def _train_dmnet(dataset: SegDataset, nets: Networks, cfg: RunConfig,
                 log_path: Path) -> tuple[int, dict]:
    stage_cfg = cfg.train.dmnet
    train_clips, val_clips = _train_val_clips(dataset)
    rng = np.random.default_rng([cfg.seed, _STAGE_SEED_OFFSET["dmnet"]])
    _freeze(nets.segnet)
    _freeze(nets.flownet)

    opt = torch.optim.Adam(nets.dmnet.parameters(), lr=stage_cfg.lr_high,
                           betas=(cfg.train.adam_beta1, cfg.train.adam_beta2))
    log = MetricsCSV(log_path, ["step", "loss", "lr"])
    steps_per_epoch = stage_cfg.steps_per_epoch or max(1, len(train_clips))
    nets.dmnet.train()
    step = 0
    for lr in _epoch_lrs(stage_cfg):
        _set_lr(opt, lr)
        for _ in range(steps_per_epoch):
            picks = []
            for _ in range(stage_cfg.batch_size):
                clip = train_clips[int(rng.integers(len(train_clips)))]
                t, tk = sample_dmnet_pair(clip, rng)
                picks.append((clip, t, tk))
            frames_a = torch.stack([c.frames[t] for c, t, _ in picks])
            frames_b = torch.stack([c.frames[tk] for c, _, tk in picks])
            frame_prop, m_gt = _dmnet_batch_targets(nets, frames_a, frames_b)
            m_pred = predict_distortion(frame_prop, frames_b, nets.dmnet).squeeze(1)
            loss = dmnet_loss(m_pred, m_gt)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.row([step, float(loss.detach()), lr])
            step += 1
    log.close()

    nets.dmnet.eval()
    scores, targets = [], []
    debug_dir = log_path.parent / "dmnet_debug"
    with torch.no_grad():
        for ci, clip in enumerate(val_clips or train_clips):
            for k in range(1, min(10, len(clip))):
                a = clip.frames[0][None]
                b = clip.frames[k][None]
                frame_prop, m_gt = _dmnet_batch_targets(nets, a, b)
                m_pred = predict_distortion(frame_prop, b, nets.dmnet).squeeze(1)
                scores.append(m_pred.numpy().ravel())
                targets.append(m_gt.numpy().ravel())
                if stage_cfg.debug_dumps:
                    from .distortion import dump_distortion_debug

                    dump_distortion_debug(debug_dir, ci * 16 + k,
                                          1.0 - 2.0 * m_pred, m_pred, m_gt)
    scores = np.concatenate(scores)
    targets = np.concatenate(targets)
    prevalence = float(targets.mean())
    summary = {"val_positive_prevalence": prevalence}
    if 0.0 < prevalence < 1.0:
        summary["val_average_precision"] = average_precision(scores, targets)
        summary["val_mean_score_distorted"] = float(scores[targets > 0.5].mean())
        summary["val_mean_score_clean"] = float(scores[targets <= 0.5].mean())
    return step, summary


# ---------------------------------------------------------------------------
# Stage: joint
# ---------------------------------------------------------------------------


def _train_joint(dataset: SegDataset, nets: Networks, cfg: RunConfig,
                 log_path: Path, ablation: str) -> tuple[int, dict]:
    stage_cfg = cfg.train.joint
    train_clips, _ = _train_val_clips(dataset)
    rng = np.random.default_rng([cfg.seed, _STAGE_SEED_OFFSET["joint"]])
    _freeze(nets.segnet)
    _freeze(nets.dmnet)
    digest_before = {"segnet": params_digest(nets.segnet), "dmnet": params_digest(nets.dmnet)}

    trainable = list(nets.flownet.parameters())
    if ablation != "no-fcm":
        trainable += list(nets.cfnet.parameters())
    opt = torch.optim.Adam(trainable, lr=stage_cfg.lr_high,
                           betas=(cfg.train.adam_beta1, cfg.train.adam_beta2))
    log = MetricsCSV(log_path, ["step", "L_P@F2", "L_C@F2", "L_DGFL@F2",
                                "L_P@F3", "L_C@F3", "L_DGFL@F3", "L_total", "lr"])
    steps_per_epoch = stage_cfg.steps_per_epoch or max(1, len(train_clips))
    nets.flownet.train()
    nets.cfnet.train()

    # Batches are homogeneous (all-dual or all-single-warp) so the cue
    # network always sees at least batch_size elements; triplets queue into
    # two buckets and whichever fills first becomes the next step's batch.
    full_bucket: list[tuple] = []
    pair_bucket: list[tuple] = []

    def next_batch():
        while True:
            clip = train_clips[int(rng.integers(len(train_clips)))]
            triplet = sample_training_triplet(clip, rng)
            if ablation == "no-dds" or triplet.f2_idx is None:
                pair_bucket.append((clip, triplet))
            else:
                full_bucket.append((clip, triplet))
            for bucket in (full_bucket, pair_bucket):
                if len(bucket) >= stage_cfg.batch_size:
                    picked = bucket[: stage_cfg.batch_size]
                    del bucket[: stage_cfg.batch_size]
                    return picked

    step = 0
    for lr in _epoch_lrs(stage_cfg):
        _set_lr(opt, lr)
        for _ in range(steps_per_epoch):
            batch = next_batch()
            dual = batch[0][1].f2_idx is not None
            f1 = torch.stack([c.frames[t.f1_idx] for c, t in batch])
            f3 = torch.stack([c.frames[t.f3_idx] for c, t in batch])
            gt3 = torch.stack([c.labels[t.f3_idx] for c, t in batch])
            f2 = torch.stack([c.frames[t.f2_idx] for c, t in batch]) if dual else None
            result = dds_forward(nets, f1, f2, f3, gt3, dataset.ignore_index, ablation)

            opt.zero_grad()
            result.total.backward()
            opt.step()

            log.row([
                step,
                None if result.f2 is None else result.f2.l_p,
                None if result.f2 is None else result.f2.l_c,
                None if result.f2 is None else result.f2.l_dgfl,
                result.f3.l_p,
                result.f3.l_c,
                result.f3.l_dgfl,
                float(result.total.detach()),
                lr,
            ])
            step += 1
    log.close()

    digest_after = {"segnet": params_digest(nets.segnet), "dmnet": params_digest(nets.dmnet)}
    if digest_after != digest_before:
        raise DataIntegrityError("frozen networks changed during the joint stage")
    return step, {
        "ablation": ablation,
        "frozen_digests": digest_before,
    }


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def train_stage(
    stage: str,
    dataset: SegDataset,
    out_dir: str | Path,
    cfg: RunConfig,
    ablation: str = "none",
) -> StageResult:
    """Run one training stage end to end: prerequisites, loop, checkpoint."""
    if stage not in checkpoints.STAGE_ORDER:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {checkpoints.STAGE_ORDER}")
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")
    if ablation != "none" and stage != "joint":
        raise ConfigError(f"ablations only apply to the joint stage, not {stage!r}")

    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    network_hash = cfg.network_hash()
    checkpoints.require_stages(ckpt_dir, checkpoints.STAGE_REQUIRES[stage], network_hash)

    torch.manual_seed(cfg.seed * 1000 + _STAGE_SEED_OFFSET[stage])
    nets = build_networks(cfg.networks, dataset.num_classes)
    for prereq in checkpoints.STAGE_REQUIRES[stage]:
        checkpoints.load_stage(ckpt_dir, prereq, nets, network_hash)

    log_path = out_dir / "logs" / f"{stage}.csv"
    stage_cfg = cfg.train.stage(stage)
    if stage == "segnet":
        steps, summary = _train_segnet(dataset, nets, cfg, log_path)
    elif stage == "flow-pretrain":
        steps, summary = _train_flow(dataset, nets, cfg, log_path)
    elif stage == "dmnet":
        steps, summary = _train_dmnet(dataset, nets, cfg, log_path)
    else:
        steps, summary = _train_joint(dataset, nets, cfg, log_path, ablation)

    epochs = stage_cfg.epochs_high + stage_cfg.epochs_low
    ckpt = checkpoints.save_stage(ckpt_dir, stage, nets, cfg.seed, network_hash,
                                  epoch=epochs, summary=summary)
    return StageResult(stage=stage, steps=steps, checkpoint=ckpt,
                       metrics_csv=log_path, summary=summary)
