"""Warping kernel, mask recurrences and the iterative alignment loop."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from oodinv.config import SammConfig
from oodinv.errors import ShapeError, ValidationError
from oodinv.samm import (SammLevel, accumulate_mask, apply_alignment,
                         gather_masks, grid_sample, iterative_align,
                         save_mask_pngs, upsample_mask)

from conftest import finite_diff_grad, rel_error


class TestGridSample:
    def test_zero_flow_identity(self):
        torch.manual_seed(0)
        for shape in [(1, 4, 4), (3, 8, 8), (2, 16, 16)]:
            feat = torch.randn(*shape)
            zero = torch.zeros(shape[-2:])
            out = grid_sample(feat, zero, zero)
            assert (out - feat).abs().max() <= 1e-6

    def test_integer_pixel_shift(self):
        # output(p) = input(p + flow(p)): a one-pixel +x flow moves content left
        feat = torch.zeros(1, 4, 4)
        feat[0, 1, 1] = 1.0
        dx = torch.full((4, 4), 2.0 / 4.0)
        dy = torch.zeros(4, 4)
        out = grid_sample(feat, dx, dy)
        expected = torch.zeros(1, 4, 4)
        expected[0, 1, 0] = 1.0
        assert torch.allclose(out, expected, atol=1e-6)

    def test_half_pixel_shift_on_ramp(self):
        # bilinear interpolation of a linear ramp averages neighboring values
        w = 8
        ramp = torch.arange(w, dtype=torch.float32).repeat(w, 1).unsqueeze(0)
        dx = torch.full((w, w), 1.0 / w)  # half a pixel
        dy = torch.zeros(w, w)
        out = grid_sample(ramp, dx, dy)
        inner = out[0, :, : w - 1]
        expected = (ramp[0, :, : w - 1] + ramp[0, :, 1:]) / 2
        assert (inner - expected).abs().max() <= 1e-6

    def test_border_padding_clamps(self):
        feat = torch.tensor([[[1.0, 2.0], [3.0, 4.0]]])
        dx = torch.full((2, 2), 5.0)
        dy = torch.zeros(2, 2)
        out = grid_sample(feat, dx, dy)
        assert torch.allclose(out[0, :, :], torch.tensor([[2.0, 2.0], [4.0, 4.0]]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            grid_sample(torch.zeros(1, 4, 4), torch.zeros(2, 2), torch.zeros(2, 2))

    def test_non_finite_flow(self):
        dx = torch.zeros(4, 4)
        dx[0, 0] = float("inf")
        with pytest.raises(ValidationError):
            grid_sample(torch.zeros(1, 4, 4), dx, torch.zeros(4, 4))

    def test_gradients_match_finite_differences(self):
        # flow magnitudes stay in [0.05, 0.12] so no sample position sits
        # within the FD step of a bilinear-cell kink
        torch.manual_seed(1)
        feat = torch.randn(1, 1, 6, 6, dtype=torch.float64)
        sign_x = torch.randint(0, 2, (1, 6, 6)).double() * 2 - 1
        sign_y = torch.randint(0, 2, (1, 6, 6)).double() * 2 - 1
        dx = sign_x * (torch.rand(1, 6, 6, dtype=torch.float64) * 0.07 + 0.05)
        dy = sign_y * (torch.rand(1, 6, 6, dtype=torch.float64) * 0.07 + 0.05)
        weights = torch.randn(1, 1, 6, 6, dtype=torch.float64)

        feat_l = feat.clone().requires_grad_(True)
        dx_l = dx.clone().requires_grad_(True)
        dy_l = dy.clone().requires_grad_(True)
        loss = (grid_sample(feat_l, dx_l, dy_l) * weights).sum()
        loss.backward()

        def f():
            return float((grid_sample(feat, dx, dy) * weights).sum())

        assert rel_error(feat_l.grad, finite_diff_grad(f, feat)) < 1e-3
        assert rel_error(dx_l.grad, finite_diff_grad(f, dx)) < 1e-3
        assert rel_error(dy_l.grad, finite_diff_grad(f, dy)) < 1e-3


class TestAccumulateMask:
    def test_first_returns_new(self):
        m = torch.rand(4, 4)
        assert torch.equal(accumulate_mask(m, None, is_first=True), m)

    def test_fixed_points(self):
        ones = torch.ones(3, 3)
        zeros = torch.zeros(3, 3)
        assert torch.equal(accumulate_mask(ones, ones, False), ones)
        assert torch.equal(accumulate_mask(zeros, zeros, False), zeros)

    def test_half_half(self):
        half = torch.full((2, 2), 0.5)
        out = accumulate_mask(half, half, False)
        assert torch.allclose(out, torch.full((2, 2), 0.5))

    def test_out_of_range_rejected(self):
        good = torch.full((2, 2), 0.5)
        bad = torch.full((2, 2), 1.2)
        with pytest.raises(ValidationError):
            accumulate_mask(bad, good, False)
        with pytest.raises(ValidationError):
            accumulate_mask(good, -bad, False)

    def test_alt_update_returns_new_mask(self):
        m_new = torch.rand(4, 4)
        m_prev = torch.rand(4, 4)
        out = accumulate_mask(m_new, m_prev, False, alt_update=True)
        assert torch.allclose(out, m_new, atol=1e-7)

    @given(u=st.floats(0, 1), v=st.floats(0, 1))
    @settings(max_examples=200, deadline=None)
    def test_range_preserved_hypothesis(self, u, v):
        out = accumulate_mask(torch.tensor([[u]]), torch.tensor([[v]]), False)
        assert 0.0 <= float(out) <= 1.0

    def test_range_preserved_bulk_and_corners(self):
        rng = np.random.default_rng(0)
        u = torch.from_numpy(rng.uniform(0, 1, 100_000))
        v = torch.from_numpy(rng.uniform(0, 1, 100_000))
        out = accumulate_mask(u, v, False)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
        for cu in (0.0, 1.0):
            for cv in (0.0, 1.0):
                val = accumulate_mask(torch.tensor([cu]), torch.tensor([cv]), False)
                assert 0.0 <= float(val) <= 1.0


class TestSammLevel:
    def setup_method(self):
        torch.manual_seed(0)
        self.cfg = SammConfig()
        self.level = SammLevel(8, self.cfg)

    def test_output_shapes(self):
        f = torch.randn(8, 12, 12)
        g = torch.randn(8, 12, 12)
        dx, dy, m = self.level.predict_step(f, g)
        assert dx.shape == (12, 12) and dy.shape == (12, 12) and m.shape == (12, 12)

    def test_flow_bounded_by_max_displacement(self):
        f = torch.randn(1000, 8, 6, 6) * 10
        g = torch.randn(1000, 8, 6, 6) * 10
        with torch.no_grad():
            dx, dy, m = self.level.predict_step(f, g)
        assert float(dx.abs().max()) <= self.cfg.max_displacement
        assert float(dy.abs().max()) <= self.cfg.max_displacement
        assert float(m.min()) >= 0.0 and float(m.max()) <= 1.0

    def test_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            self.level.predict_step(torch.randn(8, 6, 6), torch.randn(8, 4, 4))

    def test_mask_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        level = SammLevel(2, self.cfg).to(torch.float64)
        f = torch.randn(2, 5, 5, dtype=torch.float64)
        g = torch.randn(2, 5, 5, dtype=torch.float64)
        f_l = f.clone().requires_grad_(True)
        _, _, m = level.predict_step(f_l, g)
        m.mean().backward()

        def fn():
            with torch.no_grad():
                return float(level.predict_step(f, g)[2].mean())

        fd = finite_diff_grad(fn, f)
        assert rel_error(f_l.grad, fd) < 1e-3


def scripted_predictor(outputs):
    """Cycle through a fixed list of (dx, dy, m) constants."""
    state = {"i": 0}

    def predict(f, g_prev):
        dx_c, dy_c, m_c = outputs[state["i"]]
        state["i"] += 1
        h, w = g_prev.shape[-2:]
        full = lambda v: torch.full((h, w), float(v), dtype=g_prev.dtype)
        return full(dx_c), full(dy_c), full(m_c)

    return predict


def reference_align(g, scripted, n):
    """Standalone replay of the alignment recurrence (independent path)."""
    dx_acc, dy_acc, mask = 0.0, 0.0, None
    for j in range(n):
        dx_c, dy_c, m_c = scripted[j]
        dx_acc, dy_acc = dx_acc + dx_c, dy_acc + dy_c
        mask = m_c if j == 0 else m_c * mask + mask * (1 - mask)
        h, w = g.shape[-2:]
        xs = (torch.arange(w, dtype=g.dtype) * 2 + 1) / w - 1 + dx_acc
        ys = (torch.arange(h, dtype=g.dtype) * 2 + 1) / h - 1 + dy_acc
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        grid = torch.stack((gx, gy), dim=-1).unsqueeze(0)
        warped = F.grid_sample(g.unsqueeze(0), grid, mode="bilinear",
                               padding_mode="border", align_corners=False).squeeze(0)
        out = warped * mask + g * (1 - mask)
    return out, mask, dx_acc, dy_acc


class TestIterativeAlign:
    def test_zero_mask_is_transparent(self):
        torch.manual_seed(3)
        g = torch.randn(4, 6, 6)
        f = torch.randn(4, 6, 6)
        pred = scripted_predictor([(0.2, -0.1, 0.0), (0.15, 0.2, 0.0)])
        res = iterative_align(pred, f, g, SammConfig(n_iters=2))
        assert torch.equal(res.aligned, g)

    def test_zero_flow_full_mask_is_identity_warp(self):
        torch.manual_seed(4)
        g = torch.randn(4, 6, 6)
        f = torch.randn(4, 6, 6)
        pred = scripted_predictor([(0.0, 0.0, 1.0), (0.0, 0.0, 1.0)])
        res = iterative_align(pred, f, g, SammConfig(n_iters=2))
        assert (res.aligned - g).abs().max() <= 1e-6

    def test_two_step_hand_computation(self):
        torch.manual_seed(5)
        g = torch.randn(2, 8, 8)
        f = torch.randn(2, 8, 8)
        pred = scripted_predictor([(0.1, 0.0, 0.8), (0.05, 0.0, 0.5)])
        res = iterative_align(pred, f, g, SammConfig(n_iters=2))
        assert torch.allclose(res.dx, torch.full((8, 8), 0.15))
        assert torch.allclose(res.mask, torch.full((8, 8), 0.8 * (0.5 + 1 - 0.8)))
        expected = grid_sample(g, res.dx, res.dy) * 0.56 + g * 0.44
        assert (res.aligned - expected).abs().max() <= 1e-6

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_matches_standalone_reference(self, n):
        torch.manual_seed(6 + n)
        g = torch.randn(3, 10, 10, dtype=torch.float64)
        f = torch.randn(3, 10, 10, dtype=torch.float64)
        scripted = [(0.07 * (j + 1), -0.03 * j, 0.3 + 0.2 * j) for j in range(n)]
        res = iterative_align(scripted_predictor(scripted), f, g, SammConfig(n_iters=n))
        ref_out, ref_mask, ref_dx, ref_dy = reference_align(g, scripted, n)
        assert (res.aligned - ref_out).abs().max() <= 1e-6
        assert abs(float(res.mask[0, 0]) - ref_mask) <= 1e-6
        assert abs(float(res.dx[0, 0]) - ref_dx) <= 1e-9

    def test_accumulated_flow_bound(self):
        torch.manual_seed(7)
        cfg = SammConfig(n_iters=3, max_displacement=0.25)
        level = SammLevel(4, cfg)
        f = torch.randn(4, 8, 8) * 3
        g = torch.randn(4, 8, 8) * 3
        res = iterative_align(level.predict_step, f, g, cfg)
        bound = cfg.n_iters * cfg.max_displacement
        assert float(res.dx.abs().max()) <= bound
        assert float(res.dy.abs().max()) <= bound

    def test_replay_reproduces_alignment(self):
        torch.manual_seed(8)
        cfg = SammConfig(n_iters=2)
        level = SammLevel(4, cfg)
        f = torch.randn(4, 8, 8)
        g = torch.randn(4, 8, 8)
        res = iterative_align(level.predict_step, f, g, cfg)
        replay = apply_alignment(g, res.dx, res.dy, res.mask)
        assert torch.equal(replay, res.aligned)

    def test_skip_warp_keeps_masks_but_not_warp(self):
        torch.manual_seed(9)
        cfg = SammConfig(n_iters=2)
        level = SammLevel(4, cfg)
        f = torch.randn(4, 8, 8)
        g = torch.randn(4, 8, 8)
        skipped = iterative_align(level.predict_step, f, g, cfg, skip_warp=True)
        # warp replaced by identity, so the blend collapses to g up to round-off
        assert (skipped.aligned - g).abs().max() <= 1e-6
        full = iterative_align(level.predict_step, f, g, cfg)
        assert not torch.equal(skipped.aligned, full.aligned)


class TestUpsampleMask:
    def test_constant_preserved(self):
        for c in (0.0, 0.3, 1.0):
            m = torch.full((4, 4), c)
            up = upsample_mask(m, 16)
            assert torch.allclose(up, torch.full((16, 16), c), atol=1e-7)

    def test_columns_interpolate_monotonically(self):
        m = torch.tensor([[0.0, 1.0], [0.0, 1.0]])
        up = upsample_mask(m, 4)
        row = up[0]
        assert torch.all(row[1:] >= row[:-1])
        assert float(row[0]) == 0.0 and float(row[-1]) == 1.0

    def test_range_is_convex(self):
        torch.manual_seed(10)
        m = torch.rand(6, 6) * 0.6 + 0.2
        up = upsample_mask(m, 24)
        assert float(up.min()) >= float(m.min()) - 1e-7
        assert float(up.max()) <= float(m.max()) + 1e-7

    def test_downsampling_rejected(self):
        with pytest.raises(ValidationError):
            upsample_mask(torch.zeros(8, 8), 4)


class TestGatherMasks:
    def test_constant_fixed_point(self):
        for c in (0.0, 0.25, 0.5, 1.0):
            levels = [torch.full((r, r), c) for r in (4, 8, 16)]
            out = gather_masks(levels, 16)
            assert torch.allclose(out, torch.full((16, 16), c), atol=1e-6)

    def test_two_levels_hand_computation(self):
        out = gather_masks([torch.ones(4, 4), torch.full((8, 8), 0.5)], 8)
        assert torch.allclose(out, torch.full((8, 8), 0.5), atol=1e-7)

    def test_zero_is_absorbing(self):
        torch.manual_seed(11)
        first = torch.zeros(4, 4)
        later = [torch.rand(8, 8), torch.rand(16, 16)]
        out = gather_masks([first] + later, 16)
        assert torch.equal(out, torch.zeros(16, 16))

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            gather_masks([], 16)

    def test_range_preserved_bulk(self):
        rng = np.random.default_rng(1)
        u = torch.from_numpy(rng.uniform(0, 1, 100_000))
        v = torch.from_numpy(rng.uniform(0, 1, 100_000))
        out = v * (u - v + 1)  # the gathering update
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0 + 1e-12

    @given(u=st.floats(0, 1), v=st.floats(0, 1))
    @settings(max_examples=200, deadline=None)
    def test_gather_update_range_hypothesis(self, u, v):
        out = v * (u - v + 1)
        assert -1e-12 <= out <= 1.0 + 1e-12


class TestMaskDump:
    def test_writes_documented_files(self, tmp_path):
        from PIL import Image

        masks = {8: torch.rand(8, 8), 16: torch.rand(16, 16)}
        gathered = torch.rand(32, 32)
        written = save_mask_pngs(masks, gathered, tmp_path)
        names = sorted(p.name for p in written)
        assert names == ["mask_gathered.png", "mask_r16.png", "mask_r8.png"]
        img = np.asarray(Image.open(tmp_path / "mask_r8.png"))
        expected = np.round(masks[8].numpy() * 255).astype(np.uint8)
        assert (img == expected).all()
