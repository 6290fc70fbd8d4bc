import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowseg.errors import DataIntegrityError
from flowseg.propagation import (
    downscale_flow,
    propagate_step,
    start_state,
    warp_bilinear,
)

from oracles import brute_force_downscale_flow, brute_force_warp, central_difference_grad


def rand_flow(rng, h, w, scale=3.0):
    return torch.from_numpy(rng.uniform(-scale, scale, size=(2, h, w))).double()


class TestWarpBilinear:
    def test_integer_shift_row(self):
        src = torch.tensor([[1.0, 2.0, 3.0]]).double()[None]  # (1,1,3)
        flow = torch.zeros(2, 1, 3, dtype=torch.float64)
        flow[0] = 1.0
        out = warp_bilinear(src, flow)
        assert torch.equal(out, torch.tensor([[[2.0, 3.0, 0.0]]]).double())

    def test_half_pixel_row(self):
        src = torch.tensor([[1.0, 3.0]]).double()[None]
        flow = torch.zeros(2, 1, 2, dtype=torch.float64)
        flow[0] = 0.5
        out = warp_bilinear(src, flow)
        # 0.5*1 + 0.5*3 = 2 ; 0.5*3 + 0.5*(zero pad) = 1.5
        assert torch.allclose(out, torch.tensor([[[2.0, 1.5]]]).double())

    def test_identity_is_bit_exact(self):
        rng = np.random.default_rng(0)
        src = torch.from_numpy(rng.standard_normal((3, 7, 11))).float()
        out = warp_bilinear(src, torch.zeros(2, 7, 11))
        assert torch.equal(out, src)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            c = int(rng.integers(1, 5))
            h = int(rng.integers(2, 17))
            w = int(rng.integers(2, 17))
            src = rng.standard_normal((c, h, w))
            flow = rng.uniform(-4, 4, size=(2, h, w))
            got = warp_bilinear(torch.from_numpy(src), torch.from_numpy(flow)).numpy()
            want = brute_force_warp(src, flow)
            assert np.abs(got - want).max() <= 1e-6

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = torch.from_numpy(rng.standard_normal((2, 8, 8)))
        y = torch.from_numpy(rng.standard_normal((2, 8, 8)))
        flow = rand_flow(rng, 8, 8)
        lhs = warp_bilinear(2.5 * x - 1.25 * y, flow)
        rhs = 2.5 * warp_bilinear(x, flow) - 1.25 * warp_bilinear(y, flow)
        assert torch.allclose(lhs, rhs, atol=1e-6)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_convex_hull_bound(self, seed):
        rng = np.random.default_rng(seed)
        src = torch.from_numpy(rng.uniform(-5, 5, size=(1, 6, 6)))
        flow = rand_flow(rng, 6, 6, scale=8.0)
        out = warp_bilinear(src, flow)
        lo = min(0.0, src.min().item()) - 1e-9
        hi = max(0.0, src.max().item()) + 1e-9
        assert out.min().item() >= lo and out.max().item() <= hi

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(3)
        src = torch.from_numpy(rng.standard_normal((4, 3, 8, 8)))
        flow = torch.from_numpy(rng.uniform(-2, 2, size=(4, 2, 8, 8)))
        full = warp_bilinear(src, flow)
        for i in range(4):
            one = warp_bilinear(src[i], flow[i])
            assert torch.equal(full[i], one)

    def test_rejects_resolution_mismatch(self):
        with pytest.raises(DataIntegrityError):
            warp_bilinear(torch.zeros(1, 4, 4), torch.zeros(2, 8, 8))

    def test_rejects_non_finite_flow(self):
        flow = torch.zeros(2, 4, 4)
        flow[0, 0, 0] = float("nan")
        with pytest.raises(DataIntegrityError):
            warp_bilinear(torch.zeros(1, 4, 4), flow)

    def _noninteger_flow(self, rng, h, w):
        # keep fractional parts away from the kinks of bilinear interpolation
        whole = rng.integers(-2, 3, size=(2, h, w)).astype(np.float64)
        frac = rng.uniform(0.2, 0.8, size=(2, h, w))
        return torch.from_numpy(whole + frac)

    def test_gradient_wrt_src(self):
        rng = np.random.default_rng(4)
        src = torch.from_numpy(rng.standard_normal((3, 8, 8))).requires_grad_(True)
        flow = self._noninteger_flow(rng, 8, 8)
        probe = torch.from_numpy(rng.standard_normal((3, 8, 8)))
        loss = (warp_bilinear(src, flow) * probe).sum()
        loss.backward()
        fd = central_difference_grad(lambda: (warp_bilinear(src, flow) * probe).sum(), src.data)
        err = (src.grad - fd).abs().max().item() / max(1.0, fd.abs().max().item())
        assert err <= 1e-4

    def test_gradient_wrt_flow(self):
        rng = np.random.default_rng(5)
        src = torch.from_numpy(rng.standard_normal((3, 8, 8)))
        flow = self._noninteger_flow(rng, 8, 8).requires_grad_(True)
        probe = torch.from_numpy(rng.standard_normal((3, 8, 8)))
        loss = (warp_bilinear(src, flow) * probe).sum()
        loss.backward()
        fd = central_difference_grad(lambda: (warp_bilinear(src, flow) * probe).sum(), flow.data)
        err = (flow.grad - fd).abs().max().item() / max(1.0, fd.abs().max().item())
        assert err <= 1e-4


class TestDownscaleFlow:
    def test_constant_flow_scales(self):
        flow = torch.zeros(2, 8, 8, dtype=torch.float64)
        flow[0] = 4.0
        down = downscale_flow(flow, 4)
        assert down.shape == (2, 2, 2)
        assert torch.allclose(down[0], torch.ones(2, 2, dtype=torch.float64))
        assert torch.equal(down[1], torch.zeros(2, 2, dtype=torch.float64))

    def test_zero_flow_any_factor(self):
        for factor in (1, 2, 4):
            down = downscale_flow(torch.zeros(2, 8, 8), factor)
            assert not down.abs().any()

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        flow = rng.standard_normal((2, 8, 8))
        # includes the linear-ramp case u(x) = x
        flow[0] = np.arange(8, dtype=np.float64)[None, :].repeat(8, axis=0)
        for factor in (2, 4):
            got = downscale_flow(torch.from_numpy(flow), factor).numpy()
            want = brute_force_downscale_flow(flow, factor)
            assert np.abs(got - want).max() <= 1e-6

    def test_rejects_non_divisible(self):
        with pytest.raises(DataIntegrityError):
            downscale_flow(torch.zeros(2, 6, 6), 4)


class TestPropagateStep:
    def test_distance_counter_and_static_fixpoint(self):
        rng = np.random.default_rng(7)
        frame = torch.from_numpy(rng.uniform(0, 1, size=(3, 16, 16))).float()
        feature = torch.from_numpy(rng.standard_normal((5, 4, 4))).float()

        def zero_flownet(a, b):
            return torch.zeros(2, 16, 16)

        state = start_state(feature, frame, key_index=0)
        assert state.distance == 0
        state, flow = propagate_step(state, frame, zero_flownet, segnet_stride=4)
        assert state.distance == 1
        assert torch.equal(state.prop_feature, feature)
        assert torch.equal(state.prop_frame, frame)
        assert not flow.abs().any()

    def test_flow_pairs_actual_frames(self):
        seen = []

        def spy_flownet(a, b):
            seen.append((a, b))
            return torch.zeros(2, 8, 8)

        frames = [torch.full((3, 8, 8), float(i)) for i in range(3)]
        state = start_state(torch.zeros(1, 2, 2), frames[0], key_index=0)
        state, _ = propagate_step(state, frames[1], spy_flownet, segnet_stride=4)
        state, _ = propagate_step(state, frames[2], spy_flownet, segnet_stride=4)
        # second step must pair the true previous frame, not the propagated one
        assert torch.equal(seen[1][0], frames[1])
        assert torch.equal(seen[1][1], frames[2])

    def test_rejects_resolution_mismatch(self):
        state = start_state(torch.zeros(1, 2, 2), torch.zeros(3, 8, 8), key_index=0)
        with pytest.raises(DataIntegrityError):
            propagate_step(state, torch.zeros(3, 16, 16), lambda a, b: torch.zeros(2, 8, 8), 4)
