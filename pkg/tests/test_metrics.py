from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.color import rgb2lab
from skimage.metrics import structural_similarity

from physuie import data, metrics
from physuie.errors import ConfigError, ContractError, DataError

FIXTURES = Path(__file__).parent / "fixtures"

# values produced by this implementation when the fixtures were created
FROZEN = {
    "tiny_0.png": {"uiqm": 3.4154102283115573, "uciqe": 0.3622886721661891},
    "tiny_1.png": {"uiqm": 3.4617844028884717, "uciqe": 0.3787330335870356},
    "tiny_2.png": {"uiqm": 2.7044740231887374, "uciqe": 0.4697966704385622},
}


def checkerboard(n=32, cell=4):
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    return np.stack([board] * 3)


def skimage_ssim(a, b):
    return structural_similarity(a, b, channel_axis=0, data_range=1.0, gaussian_weights=True,
                                 sigma=1.5, use_sample_covariance=False)


class TestPsnr:
    def test_identity_saturates(self):
        x = torch.rand(3, 16, 16)
        r = metrics.psnr_report(x, x)
        assert r.value == 100.0 and r.saturated

    def test_constant_difference(self):
        a = torch.full((3, 8, 8), 0.3, dtype=torch.float64)
        assert metrics.psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)

    def test_symmetric(self):
        a, b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
        assert metrics.psnr(a, b) == metrics.psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            metrics.psnr(torch.rand(3, 8, 8), torch.rand(3, 8, 9))


class TestSsim:
    def test_identity(self):
        x = np.random.default_rng(0).random((3, 24, 24))
        assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_inverted_checkerboard_is_negative(self):
        x = checkerboard()
        ours = metrics.ssim(x, 1 - x)
        assert ours < 0
        assert ours == pytest.approx(skimage_ssim(x, 1 - x), abs=1e-9)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            a = rng.random((3, 32, 40))
            b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
            assert metrics.ssim(a, b) == pytest.approx(skimage_ssim(a, b), abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        assert metrics.ssim(a, b) == pytest.approx(metrics.ssim(b, a), abs=1e-12)

    def test_too_small(self):
        with pytest.raises(ConfigError):
            metrics.ssim(np.zeros((3, 10, 10)), np.zeros((3, 10, 10)))


class TestNoReference:
    def test_gray_has_no_chroma(self):
        gray = np.full((3, 32, 32), 0.42)
        gray[:, :16] = 0.7  # add structure so contrast terms are nonzero
        assert metrics.uiqm_components(gray)["uicm"] == 0.0
        comps = metrics.uciqe_components(gray)
        assert comps["chroma_std"] == pytest.approx(0.0, abs=1e-12)
        assert comps["saturation_mean"] == pytest.approx(0.0, abs=1e-12)
        assert comps["lum_contrast"] > 0

    def test_lab_close_to_reference_conversion(self):
        rgb = np.random.default_rng(3).random((3, 16, 16))
        ours = metrics.srgb_to_lab(rgb)
        ref = np.moveaxis(rgb2lab(np.moveaxis(rgb, 0, -1)), -1, 0)
        assert np.abs(ours - ref).max() < 0.01

    def test_deterministic(self):
        img = np.random.default_rng(4).random((3, 32, 32))
        assert metrics.uiqm(img) == metrics.uiqm(img.copy())
        assert metrics.uciqe(img) == metrics.uciqe(img.copy())

    @pytest.mark.parametrize("name", sorted(FROZEN))
    def test_frozen_regression_values(self, name):
        img = data.read_image(FIXTURES / name)
        assert metrics.uiqm(img) == pytest.approx(FROZEN[name]["uiqm"], rel=1e-9)
        assert metrics.uciqe(img) == pytest.approx(FROZEN[name]["uciqe"], rel=1e-9)

    def test_tiny_images_do_not_crash(self):
        img = np.random.default_rng(5).random((3, 5, 5))
        assert np.isfinite(metrics.uiqm(img))
        assert np.isfinite(metrics.uciqe(img))


def _by_name(reports):
    return {r.name: r.value for r in reports}


def brute_force_delta(pred, gt, i):
    hits = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        hits += max(p, g) <= 1.25**i * min(p, g)
    return hits / pred.size


class TestDepthMetrics:
    def test_perfect_prediction(self):
        gt = 0.5 + np.random.default_rng(0).random((1, 8, 8))
        m = _by_name(metrics.depth_metrics(gt, gt))
        assert m["rmse"] == 0 and m["abs_rel"] == 0
        assert m["delta1"] == m["delta2"] == m["delta3"] == 1.0

    def test_boundary_ratio_is_inlier(self):
        gt = 0.5 + np.random.default_rng(1).random((1, 8, 8))
        pred = 1.25 * gt
        m = _by_name(metrics.depth_metrics(pred, gt, align="none"))
        assert m["delta1"] == brute_force_delta(pred, gt, 1) == 1.0

    def test_double_depth_abs_rel(self):
        gt = 0.5 + np.random.default_rng(2).random((1, 8, 8))
        m = _by_name(metrics.depth_metrics(2 * gt, gt, align="none"))
        assert m["abs_rel"] == pytest.approx(1.0, abs=1e-12)

    def test_deltas_match_brute_force(self):
        rng = np.random.default_rng(3)
        gt = 0.5 + rng.random((1, 16, 16))
        pred = gt * np.exp(0.4 * rng.standard_normal(gt.shape))
        m = _by_name(metrics.depth_metrics(pred, gt, align="none"))
        for i in (1, 2, 3):
            assert m[f"delta{i}"] == brute_force_delta(pred, gt, i)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 1000))
    def test_median_alignment_is_scale_invariant(self, scale, seed):
        rng = np.random.default_rng(seed)
        gt = 0.5 + 5 * rng.random((1, 8, 8))
        pred = 0.5 + 5 * rng.random((1, 8, 8))
        base = _by_name(metrics.depth_metrics(pred, gt))
        scaled = _by_name(metrics.depth_metrics(scale * pred, gt))
        for k in metrics.DEPTH_METRICS:
            assert scaled[k] == pytest.approx(base[k], rel=1e-9, abs=1e-12)

    def test_mask(self):
        gt = np.ones((1, 4, 4))
        pred = np.ones((1, 4, 4))
        pred[0, 0, 0] = 100.0
        mask = np.ones((1, 4, 4), dtype=bool)
        mask[0, 0, 0] = False
        m = _by_name(metrics.depth_metrics(pred, gt, mask=mask, align="none"))
        assert m["rmse"] == 0

    def test_empty_mask(self):
        gt = np.ones((1, 4, 4))
        with pytest.raises(DataError):
            metrics.depth_metrics(gt, gt, mask=np.zeros((1, 4, 4), dtype=bool))

    def test_unknown_alignment(self):
        gt = np.ones((1, 4, 4))
        with pytest.raises(ConfigError):
            metrics.depth_metrics(gt, gt, align="least-squares")


def test_aggregate_is_order_independent():
    reports = [metrics.MetricReport("psnr", v) for v in (20.1, 30.7, 25.3, 1e-9)]
    a = metrics.aggregate(reports)
    b = metrics.aggregate(reversed(reports))
    assert a[0].value == b[0].value and a[0].count == 4


def test_image_metrics_without_reference():
    img = np.random.default_rng(6).random((3, 16, 16))
    names = [r.name for r in metrics.image_metrics(img, None)]
    assert names == ["uiqm", "uciqe"]
    with pytest.raises(ConfigError):
        metrics.image_metrics(img, None, names=("niqe",))
