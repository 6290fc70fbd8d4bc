import math

import pytest
import torch

from flowseg.config import config_from_dict
from flowseg.data import SegDataset, generate_synthetic_dataset
from flowseg.errors import ConfigError, MissingPrerequisiteError
from flowseg.networks import FEATURE_STRIDE, build_networks, params_digest
from flowseg.training import (
    dds_forward,
    frame_loss,
    correction_loss,
    propagation_loss,
    pseudo_label,
    train_stage,
)


class TestLossAlgebra:
    def test_perfect_prediction(self):
        gt = torch.randint(0, 3, (6, 6))
        logits = torch.full((3, 6, 6), -50.0)
        logits.scatter_(0, gt[None], 50.0)
        assert propagation_loss(logits, gt).item() <= 1e-6
        assert correction_loss(logits, gt).item() <= 1e-6

    def test_single_position_hand_value(self):
        # p(gt) = e^-1 -> loss = 1
        logits = torch.zeros(2, 1, 1, dtype=torch.float64)
        p = torch.tensor(math.exp(-1), dtype=torch.float64)
        logits[0] = torch.log(p)
        logits[1] = torch.log(1 - p)
        gt = torch.zeros(1, 1, dtype=torch.long)
        assert propagation_loss(logits, gt).item() == pytest.approx(1.0, abs=1e-9)

    def test_uniform_prediction_is_log_k(self):
        logits = torch.zeros(4, 5, 5)
        gt = torch.randint(0, 4, (5, 5))
        assert propagation_loss(logits, gt).item() == pytest.approx(math.log(4), abs=1e-6)

    def test_frame_loss_mean(self):
        assert frame_loss(0.0, 0.0, 0.0) == 0.0
        assert frame_loss(0.3, 0.6, 0.9) == pytest.approx(0.6)
        assert frame_loss(1.7, 1.7, 1.7) == pytest.approx(1.7)


class _StubSegNet(torch.nn.Module):
    """Feature = scaled one-hot of the true label; head = identity."""

    def __init__(self, label_feat_res: torch.Tensor, num_classes: int):
        super().__init__()
        self.feat = (
            torch.nn.functional.one_hot(label_feat_res, num_classes)
            .permute(2, 0, 1).float() * 50.0
        )
        self.feature_channels = num_classes

    def features(self, frames):
        n = frames.shape[0] if frames.ndim == 4 else 1
        out = self.feat[None].expand(n, *self.feat.shape).clone()
        return out if frames.ndim == 4 else out[0]

    def head_logits(self, feature):
        return feature

    def forward(self, frames):
        feat = self.features(frames)
        return feat, feat


class _StubFlowNet(torch.nn.Module):
    def forward(self, a, b):
        shape = (a.shape[0], 2, *a.shape[-2:]) if a.ndim == 4 else (2, *a.shape[-2:])
        return torch.zeros(shape)


class _StubCFNet(torch.nn.Module):
    def __init__(self, segnet):
        super().__init__()
        self.segnet = segnet

    def forward(self, frames):
        return self.segnet.features(frames)


class _StubDMNet(torch.nn.Module):
    def features(self, frames):
        x = frames if frames.ndim == 4 else frames[None]
        pooled = torch.nn.functional.avg_pool2d(x, FEATURE_STRIDE)
        return pooled if frames.ndim == 4 else pooled[0]


class _FakeNets:
    def __init__(self, label_feat_res, num_classes):
        self.segnet = _StubSegNet(label_feat_res, num_classes)
        self.flownet = _StubFlowNet()
        self.cfnet = _StubCFNet(self.segnet)
        self.dmnet = _StubDMNet()


class TestDDSForward:
    def _static_setup(self):
        # constant label field: bilinear logit upsampling is exact there, so
        # a perfectly fitted segmenter really does zero every loss term
        g = torch.Generator().manual_seed(0)
        label_feat = torch.full((4, 4), 1, dtype=torch.long)
        label_full = label_feat.repeat_interleave(4, 0).repeat_interleave(4, 1)
        frame = torch.rand(3, 16, 16, generator=g)
        nets = _FakeNets(label_feat, num_classes=3)
        batch = lambda t: t[None]
        return nets, batch(frame), batch(label_full)

    def test_static_fixpoint_all_losses_vanish(self):
        """Identical frames, exact flow of zero, a segmenter that fits the
        labels: every supervision term of both legs is ~0."""
        nets, frame, gt = self._static_setup()
        out = dds_forward(nets, frame, frame.clone(), frame.clone(), gt)
        for bundle in (out.f2, out.f3):
            assert bundle.l_p <= 1e-6
            assert bundle.l_c <= 1e-6
            assert bundle.l_dgfl <= 1e-6
        assert float(out.total) <= 1e-6
        assert out.frames_supervised == 2

    def test_degenerate_pair_has_single_leg(self):
        nets, frame, gt = self._static_setup()
        out = dds_forward(nets, frame, None, frame.clone(), gt)
        assert out.f2 is None
        assert out.frames_supervised == 1

    def test_no_fcm_drops_correction_terms(self):
        nets, frame, gt = self._static_setup()
        out = dds_forward(nets, frame, frame.clone(), frame.clone(), gt, ablation="no-fcm")
        assert out.f3.l_c is None and out.f3.l_dgfl is None
        assert out.f3.l_p <= 1e-6

    def test_unknown_ablation_rejected(self):
        nets, frame, gt = self._static_setup()
        with pytest.raises(ConfigError):
            dds_forward(nets, frame, None, frame, gt, ablation="no-everything")

    def test_pseudo_label_matches_fitted_labels(self):
        nets, frame, gt = self._static_setup()
        pl = pseudo_label(frame, nets.segnet)
        assert torch.equal(pl, gt)
        assert torch.equal(pl, pseudo_label(frame, nets.segnet))


TINY_CONFIG = {
    "seed": 11,
    "data": {"synth": {"seed": 11, "num_clips": 3, "frames_per_clip": 10, "num_shapes": 2}},
    "networks": {"feature_channels": 16, "segnet_base": 8, "flownet_base": 8,
                 "dmnet_channels": 8, "cfnet_base": 8},
    "train": {
        "segnet": {"epochs_high": 1, "epochs_low": 1, "batch_size": 8},
        "flow_pretrain": {"epochs_high": 1, "epochs_low": 1, "batch_size": 8},
        "dmnet": {"epochs_high": 1, "epochs_low": 1, "batch_size": 4, "steps_per_epoch": 3},
        "joint": {"epochs_high": 1, "epochs_low": 1, "batch_size": 2, "steps_per_epoch": 3},
    },
}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = config_from_dict(TINY_CONFIG)
    root = tmp_path_factory.mktemp("tinyrun")
    generate_synthetic_dataset(cfg.data.synth, root / "data", force=True)
    return cfg, SegDataset(root / "data"), root / "out"


class TestStages:
    def test_out_of_order_stage_rejected(self, tiny_run):
        cfg, dataset, out = tiny_run
        with pytest.raises(MissingPrerequisiteError):
            train_stage("joint", dataset, out, cfg)
        with pytest.raises(MissingPrerequisiteError):
            train_stage("dmnet", dataset, out, cfg)

    def test_full_stage_chain(self, tiny_run):
        cfg, dataset, out = tiny_run
        seg = train_stage("segnet", dataset, out, cfg)
        assert seg.checkpoint.is_file()
        assert seg.metrics_csv.read_text().startswith("step,loss,lr")
        assert 0.0 <= seg.summary["val_miou"] <= 1.0

        flow = train_stage("flow-pretrain", dataset, out, cfg)
        assert "val_epe" in flow.summary and "static_mean_abs_flow" in flow.summary

        dm = train_stage("dmnet", dataset, out, cfg)
        assert "val_positive_prevalence" in dm.summary

        before = {
            "segnet": params_digest(self._load(cfg, dataset, out, "segnet")),
            "dmnet": params_digest(self._load(cfg, dataset, out, "dmnet")),
        }
        joint = train_stage("joint", dataset, out, cfg)
        header = joint.metrics_csv.read_text().splitlines()[0]
        assert header == "step,L_P@F2,L_C@F2,L_DGFL@F2,L_P@F3,L_C@F3,L_DGFL@F3,L_total,lr"
        after = {
            "segnet": params_digest(self._load(cfg, dataset, out, "segnet")),
            "dmnet": params_digest(self._load(cfg, dataset, out, "dmnet")),
        }
        assert before == after, "joint stage must leave frozen stages byte-identical"

    @staticmethod
    def _load(cfg, dataset, out, stage):
        from flowseg import checkpoints

        nets = build_networks(cfg.networks, dataset.num_classes)
        checkpoints.load_stage(out / "checkpoints", stage, nets)
        return nets.named()[stage if stage != "joint" else "flownet"]

    def test_hash_mismatch_rejected(self, tiny_run, tmp_path):
        cfg, dataset, out = tiny_run
        altered = config_from_dict({**TINY_CONFIG, "networks": {**TINY_CONFIG["networks"], "segnet_base": 16}})
        with pytest.raises(ConfigError, match="hash"):
            train_stage("flow-pretrain", dataset, out, altered)

    def test_ablation_only_on_joint(self, tiny_run):
        cfg, dataset, out = tiny_run
        with pytest.raises(ConfigError):
            train_stage("segnet", dataset, out, cfg, ablation="no-dds")

    def test_joint_rerun_is_deterministic(self, tiny_run):
        cfg, dataset, out = tiny_run
        csv_a = train_stage("joint", dataset, out, cfg).metrics_csv.read_text()
        csv_b = train_stage("joint", dataset, out, cfg).metrics_csv.read_text()
        assert csv_a == csv_b

    def test_logged_total_is_mean_of_logged_components(self, tiny_run):
        """Every logged L_total must equal the mean of the per-frame means of
        its logged components (up to CSV rounding)."""
        import csv as csvmod

        cfg, dataset, out = tiny_run
        with open(out / "logs" / "joint.csv", newline="") as f:
            rows = list(csvmod.DictReader(f))
        assert rows
        for row in rows:
            f3 = (float(row["L_P@F3"]) + float(row["L_C@F3"]) + float(row["L_DGFL@F3"])) / 3
            if row["L_P@F2"]:
                f2 = (float(row["L_P@F2"]) + float(row["L_C@F2"]) + float(row["L_DGFL@F2"])) / 3
                expected = (f2 + f3) / 2
            else:
                expected = f3
            assert abs(float(row["L_total"]) - expected) <= 5e-6, row
