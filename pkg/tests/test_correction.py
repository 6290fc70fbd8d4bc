import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowseg.correction import dgfl_loss, fuse_features, weighted_cross_entropy
from flowseg.errors import DataIntegrityError

from oracles import central_difference_grad


class TestFuseFeatures:
    def test_endpoints_bit_exact(self):
        fp = torch.randn(8, 6, 6)
        fc = torch.randn(8, 6, 6)
        assert torch.equal(fuse_features(fp, fc, torch.zeros(1, 6, 6)), fp)
        assert torch.equal(fuse_features(fp, fc, torch.ones(1, 6, 6)), fc)

    def test_scalar_worked_example(self):
        fp = torch.full((1, 1, 1), 2.0)
        fc = torch.full((1, 1, 1), 6.0)
        m = torch.full((1, 1, 1), 0.25)
        assert fuse_features(fp, fc, m).item() == pytest.approx(3.0)

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_convex_between_inputs(self, seed):
        g = torch.Generator().manual_seed(seed)
        fp = torch.randn(4, 5, 5, generator=g)
        fc = torch.randn(4, 5, 5, generator=g)
        m = torch.rand(1, 5, 5, generator=g)
        out = fuse_features(fp, fc, m)
        lo = torch.minimum(fp, fc) - 1e-6
        hi = torch.maximum(fp, fc) + 1e-6
        assert ((out >= lo) & (out <= hi)).all()

    def test_distortion_broadcasts_across_channels(self):
        fp = torch.zeros(3, 2, 2)
        fc = torch.ones(3, 2, 2)
        m = torch.tensor([[0.0, 1.0], [0.25, 0.75]])
        out = fuse_features(fp, fc, m)
        for c in range(3):
            assert torch.equal(out[c], m)

    def test_rejects_out_of_range_map(self):
        with pytest.raises(DataIntegrityError):
            fuse_features(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2), torch.full((1, 2, 2), 1.5))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(DataIntegrityError):
            fuse_features(torch.zeros(1, 2, 2), torch.zeros(1, 3, 3), torch.zeros(1, 2, 2))

    def test_no_gradient_into_distortion(self):
        fp = torch.randn(2, 3, 3, requires_grad=True)
        fc = torch.randn(2, 3, 3, requires_grad=True)
        m = torch.rand(1, 3, 3, requires_grad=True)
        fuse_features(fp, fc, m).sum().backward()
        assert fp.grad is not None and fc.grad is not None
        assert m.grad is None

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(0)
        fp = torch.from_numpy(rng.standard_normal((2, 8, 8))).requires_grad_(True)
        fc = torch.from_numpy(rng.standard_normal((2, 8, 8))).requires_grad_(True)
        m = torch.from_numpy(rng.uniform(0, 1, (1, 8, 8)))
        probe = torch.from_numpy(rng.standard_normal((2, 8, 8)))

        def loss():
            return (fuse_features(fp, fc, m) * probe).sum()

        loss().backward()
        for t in (fp, fc):
            fd = central_difference_grad(loss, t.data)
            err = (t.grad - fd).abs().max().item() / max(1.0, fd.abs().max().item())
            assert err <= 1e-4


class TestDGFLLoss:
    def test_zero_map_kills_loss(self):
        logits = torch.randn(4, 8, 8)
        gt = torch.randint(0, 4, (8, 8))
        assert dgfl_loss(logits, gt, torch.zeros(8, 8)).item() == 0.0

    def test_single_position_worked_example(self):
        # p(gt class) = e^-2 at the only position, weight 0.5 -> loss = 1
        logits = torch.zeros(2, 1, 1, dtype=torch.float64)
        p = math_exp = torch.tensor(0.1353352832366127, dtype=torch.float64)  # e^-2
        # build logits whose softmax gives (p, 1-p)
        logits[0] = torch.log(p)
        logits[1] = torch.log(1 - p)
        gt = torch.zeros(1, 1, dtype=torch.long)
        m = torch.full((1, 1), 0.5, dtype=torch.float64)
        assert dgfl_loss(logits, gt, m).item() == pytest.approx(1.0, abs=1e-9)

    def test_perfect_prediction_any_map(self):
        gt = torch.randint(0, 3, (6, 6))
        logits = torch.full((3, 6, 6), -50.0)
        logits.scatter_(0, gt[None], 50.0)
        m = torch.rand(6, 6)
        assert dgfl_loss(logits, gt, m).item() <= 1e-6

    def test_monotone_in_map(self):
        g = torch.Generator().manual_seed(1)
        logits = torch.randn(3, 5, 5, generator=g)
        gt = torch.randint(0, 3, (5, 5), generator=g)
        m = torch.rand(5, 5, generator=g) * 0.5
        base = dgfl_loss(logits, gt, m).item()
        for _ in range(5):
            y, x = torch.randint(0, 5, (2,), generator=g)
            bumped = m.clone()
            bumped[y, x] += 0.4
            assert dgfl_loss(logits, gt, bumped).item() >= base - 1e-9

    def test_non_negative(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(10):
            logits = torch.randn(4, 4, 4, generator=g)
            gt = torch.randint(0, 4, (4, 4), generator=g)
            m = torch.rand(4, 4, generator=g)
            assert dgfl_loss(logits, gt, m).item() >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        logits = torch.from_numpy(rng.standard_normal((3, 8, 8))).requires_grad_(True)
        gt = torch.from_numpy(rng.integers(0, 3, (8, 8)))
        m = torch.from_numpy(rng.uniform(0, 1, (8, 8)))

        def loss():
            return dgfl_loss(logits, gt, m)

        loss().backward()
        fd = central_difference_grad(loss, logits.data)
        err = (logits.grad - fd).abs().max().item() / max(1.0, fd.abs().max().item())
        assert err <= 1e-4


class TestWeightedCrossEntropy:
    def test_ignored_positions_excluded(self):
        logits = torch.randn(1, 3, 2, 2)
        labels = torch.tensor([[[0, 255], [255, 255]]])
        loss_all = weighted_cross_entropy(logits, labels, None)
        only = torch.log_softmax(logits[0], 0)[0, 0, 0]
        assert loss_all.item() == pytest.approx((-only).item(), rel=1e-6)

    def test_all_ignored_raises(self):
        with pytest.raises(DataIntegrityError):
            weighted_cross_entropy(torch.randn(1, 3, 2, 2), torch.full((1, 2, 2), 255), None)

    def test_per_sample_averaging(self):
        g = torch.Generator().manual_seed(0)
        logits = torch.randn(3, 4, 6, 6, generator=g)
        labels = torch.randint(0, 4, (3, 6, 6), generator=g)
        batched = weighted_cross_entropy(logits, labels, None)
        for i in range(3):
            one = weighted_cross_entropy(logits[i : i + 1], labels[i : i + 1], None)
            assert batched[i].item() == pytest.approx(one.item(), rel=1e-6)
