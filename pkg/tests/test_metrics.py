"""PSNR / SSIM / IoU metric definitions."""

import math

import pytest
import torch

from oodinv.errors import ShapeError
from oodinv.metrics import mask_iou, psnr, ssim


class TestPsnr:
    def test_identical_images_capped(self):
        x = torch.rand(3, 64, 64)
        assert psnr(x, x) == 99.0

    def test_constant_difference_closed_form(self):
        a = torch.zeros(3, 32, 32, dtype=torch.float64)
        b = torch.full((3, 32, 32), 0.2, dtype=torch.float64)
        assert abs(psnr(a, b) - 10 * math.log10(4 / (0.2 ** 2))) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(torch.zeros(3, 8, 8), torch.zeros(3, 4, 4))


class TestSsim:
    def test_self_similarity_is_one(self):
        torch.manual_seed(0)
        x = torch.rand(3, 64, 64) * 2 - 1
        assert abs(ssim(x, x) - 1.0) <= 1e-9

    def test_bounded(self):
        torch.manual_seed(1)
        a = torch.rand(3, 64, 64) * 2 - 1
        b = torch.rand(3, 64, 64) * 2 - 1
        assert -1.0 <= ssim(a, b) <= 1.0

    def test_decreases_with_noise(self):
        torch.manual_seed(2)
        x = torch.rand(3, 64, 64) * 2 - 1
        n = torch.randn_like(x)
        assert ssim(x, (x + 0.05 * n).clamp(-1, 1)) > ssim(x, (x + 0.3 * n).clamp(-1, 1))


class TestMaskIou:
    def test_perfect_overlap(self):
        m = torch.zeros(8, 8)
        m[:4] = 1.0
        assert mask_iou(m, m) == 1.0

    def test_half_overlap(self):
        pred = torch.zeros(8, 8)
        pred[:, :4] = 1.0
        gt = torch.zeros(8, 8)
        gt[:4, :] = 1.0
        assert abs(mask_iou(pred, gt) - (16 / 48)) < 1e-9

    def test_empty_ground_truth_is_undefined(self):
        assert mask_iou(torch.rand(8, 8), torch.zeros(8, 8)) is None
