import json
import logging
import math

import numpy as np
import pytest
import torch

from core.config import MetricsConfig
from helpers import rendered_scene
from losses.perceptual import PyramidDistance
from metrics.image_metrics import bor, image_ssim, masked_perceptual, masked_region_masks, psnr
from metrics.report import EvalReport, RegionScores, ViewMetrics, aggregate, evaluate
from oracles import direct_ssim, loop_psnr

F64 = torch.float64


def _images(seed=0, height=12, width=10):
    generator = torch.Generator().manual_seed(seed)
    a = torch.rand(height, width, 3, generator=generator, dtype=F64)
    b = torch.rand(height, width, 3, generator=generator, dtype=F64)
    return a, b, generator


def _view(frame, full, visible, occluded):
    return ViewMetrics(frame=frame, full=full, visible=visible, occluded=occluded)


class TestPsnr:
    """Tests for peak signal-to-noise ratio."""

    def test_identical_images(self):
        """Test identical images are infinitely good."""
        a, _, _ = _images()
        assert psnr(a, a.clone()) == math.inf

    def test_constant_offset(self):
        """Test a uniform error of 0.1 gives 20 dB."""
        a = torch.full((4, 4, 3), 0.5, dtype=F64)
        assert psnr(a, a + 0.1) == pytest.approx(20.0, rel=1e-12)

    def test_matches_pixel_loop(self):
        """Test the masked value agrees with a per-pixel loop."""
        a, b, generator = _images(1)
        region = torch.rand(a.shape[:2], generator=generator) > 0.4
        expected = loop_psnr(a.numpy(), b.numpy(), region.numpy())
        assert psnr(a, b, region) == pytest.approx(expected, rel=1e-12)

    def test_float_region_is_thresholded(self):
        """Test a soft region selects pixels above one half."""
        a, b, generator = _images(2)
        soft = torch.rand(a.shape[0], a.shape[1], 1, generator=generator, dtype=F64)
        assert psnr(a, b, soft) == psnr(a, b, soft[..., 0] > 0.5)

    def test_empty_region(self, caplog):
        """Test an empty region is undefined and warns."""
        a, b, _ = _images()
        with caplog.at_level(logging.WARNING, logger="soar"):
            value = psnr(a, b, torch.zeros(a.shape[:2], dtype=torch.bool))
        assert math.isnan(value)
        assert "empty region" in caplog.text

    def test_shape_mismatch(self):
        """Test images of different sizes are rejected."""
        with pytest.raises(ValueError, match="shapes differ"):
            psnr(torch.zeros(4, 4, 3), torch.zeros(4, 5, 3))


class TestImageMetrics:
    """Tests for SSIM, masked perceptual distance and region splitting."""

    def test_ssim_matches_direct_windows(self):
        """Test SSIM agrees with the windowed definition."""
        a, b, _ = _images(3, 16, 14)
        assert image_ssim(a, 0.5 * a + 0.5 * b) == pytest.approx(
            direct_ssim(a.numpy(), (0.5 * a + 0.5 * b).numpy()), rel=1e-9
        )

    def test_masked_perceptual_ignores_outside(self):
        """Test differences outside the region do not count."""
        a, b, _ = _images(4, 16, 16)
        region = torch.zeros(16, 16, dtype=torch.bool)
        region[4:12, 4:12] = True
        render = torch.where(region[..., None], a, b)
        assert masked_perceptual(a, render, PyramidDistance(), region) == 0.0
        assert masked_perceptual(a, render, PyramidDistance()) > 0.0

    def test_masked_perceptual_empty_region(self):
        """Test an empty region has no perceptual score."""
        a, b, _ = _images(5)
        assert math.isnan(masked_perceptual(a, b, PyramidDistance(), torch.zeros(a.shape[:2], dtype=torch.bool)))

    def test_regions_partition_subject(self):
        """Test visible and occluded pixels split the subject exactly."""
        generator = torch.Generator().manual_seed(6)
        occlusion = torch.rand(8, 8, 1, generator=generator, dtype=F64)
        subject = torch.rand(8, 8, generator=generator) > 0.3
        visible, occluded = masked_region_masks(occlusion, subject, threshold=0.5)
        assert torch.equal(visible | occluded, subject)
        assert not bool((visible & occluded).any())
        assert torch.equal(occluded, subject & (occlusion[..., 0] > 0.5))

    def test_bor_is_mean_occlusion(self, gt_cloud):
        """Test the occlusion ratio averages per-surfel occlusion."""
        assert bor(gt_cloud) == 0.0
        with torch.no_grad():
            gt_cloud.occlusion[::2] = 1.0
        expected = float(np.ceil(gt_cloud.num_surfels / 2) / gt_cloud.num_surfels)
        assert bor(gt_cloud) == pytest.approx(expected)


class TestReport:
    """Tests for the evaluation report."""

    def test_aggregate_weights_by_pixels(self):
        """Test view scores are averaged with pixel-count weights and undefined values skipped."""
        views = [
            _view(0, RegionScores(psnr=20.0, pixels=100), RegionScores(psnr=30.0, pixels=30),
                  RegionScores(pixels=0)),
            _view(1, RegionScores(psnr=40.0, pixels=300), RegionScores(psnr=10.0, pixels=10),
                  RegionScores(psnr=25.0, pixels=5)),
        ]
        merged = aggregate(views)
        assert merged["full"].psnr == pytest.approx(35.0)
        assert merged["full"].pixels == 400
        assert merged["visible"].psnr == pytest.approx(25.0)
        assert merged["occluded"].psnr == 25.0
        assert merged["occluded"].ssim is None

    def test_infinite_psnr_serializes(self, tmp_path):
        """Test identical images survive the JSON round as Infinity."""
        report = EvalReport(
            views=[_view(0, RegionScores(psnr=math.inf, pixels=4), RegionScores(), RegionScores())],
            bor=0.25,
        )
        path = tmp_path / "metrics.json"
        report.write(path)
        text = path.read_text()
        assert "Infinity" in text
        assert json.loads(text)["views"][0]["occluded"]["psnr"] is None

    def test_report_bounds_bor(self):
        """Test an occlusion ratio outside [0, 1] is rejected."""
        with pytest.raises(ValueError):
            EvalReport(bor=1.5)

    def test_evaluate_ground_truth(self, gt_cloud, template):
        """Test the generating avatar scores near perfectly on its own renders."""
        sequence, observations = rendered_scene(gt_cloud, template, frames=2, size=24)
        observations[1].split = "test"
        report = evaluate(gt_cloud, template, sequence, observations, MetricsConfig())
        assert [view.frame for view in report.views] == [1]
        view = report.views[0]
        assert view.full.psnr > 60.0
        assert view.full.ssim == pytest.approx(1.0, abs=1e-6)
        assert view.full.pixels == 24 * 24
        assert view.occluded.pixels == 0
        assert view.occluded.psnr is None
        assert view.visible.pixels == int((observations[1].mask[..., 0] > 0.5).sum())
        assert report.bor == 0.0

    def test_subject_full_region(self, gt_cloud, template):
        """Test the full region can be restricted to the subject mask."""
        sequence, observations = rendered_scene(gt_cloud, template, frames=1, size=24)
        report = evaluate(gt_cloud, template, sequence, observations, MetricsConfig(full_region="subject"))
        assert report.full_region == "subject"
        assert report.views[0].full.pixels == int((observations[0].mask[..., 0] > 0.5).sum())
