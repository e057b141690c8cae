import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import fftconvolve

from aberforge import quantify, simulate
from aberforge.quantify import (
    CANONICAL_OD_VECTORS,
    OIQReport,
    QuantifyError,
    chromatic_class,
    fidelity_metrics,
    fwhm,
    mtf_from_psf,
    od_class,
    oiq,
    oiqe,
    psnr,
    quantify_lens,
    severity_class,
    sfr_frequencies,
    sfr_from_edge,
    spatial_uniformity,
    ssim,
)

from conftest import gaussian_kernel


class TestFidelity:
    def test_psnr_uniform_offset(self):
        a = np.full((32, 32), 16.0 / 255.0)
        b = np.zeros((32, 32))
        assert psnr(a, b) == pytest.approx(24.0484, abs=0.01)

    def test_psnr_cap(self):
        img = np.random.default_rng(0).random((16, 16))
        assert psnr(img, img) == 60.0
        tiny = img + 1e-9
        assert psnr(tiny, img) == 60.0

    def test_psnr_shape_guard(self):
        with pytest.raises(QuantifyError):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))

    def test_ssim_identity_and_range(self):
        img = np.random.default_rng(1).random((64, 64))
        assert ssim(img, img) == pytest.approx(1.0)
        noisy = np.clip(img + np.random.default_rng(2).normal(0, 0.2, img.shape), 0, 1)
        val = ssim(noisy, img)
        assert -1.0 <= val < 1.0

    def test_fidelity_metrics_tuple(self):
        img = np.random.default_rng(3).random((32, 32))
        p, s = fidelity_metrics(img, img)
        assert p == 60.0 and s == pytest.approx(1.0)


class TestMTF:
    def test_gaussian_oracle(self):
        freqs = sfr_frequencies(32)
        sel = freqs <= 0.4
        for sigma in (1.0, 2.0, 3.0):
            measured = mtf_from_psf(gaussian_kernel(sigma), 32)
            expected = np.exp(-2.0 * math.pi**2 * sigma**2 * freqs**2)
            assert np.max(np.abs(measured[sel] - expected[sel])) <= 0.02

    def test_delta_is_flat(self):
        d = np.zeros((9, 9))
        d[4, 4] = 1.0
        np.testing.assert_allclose(mtf_from_psf(d, 16), 1.0, atol=1e-12)

    def test_zero_kernel_raises(self):
        with pytest.raises(QuantifyError):
            mtf_from_psf(np.zeros((5, 5)))


class TestSFR:
    def test_ideal_edge_near_unity_at_low_freq(self):
        board = simulate.checkerboard(512)
        patch = simulate.knife_edge_patches(board)[0]
        s = sfr_from_edge(patch[:, :, 0], 32)
        freqs = sfr_frequencies(32)
        assert s[freqs <= 0.25].min() >= 0.98

    def test_gaussian_blur_oracle(self):
        sigma = 2.0
        board = simulate.checkerboard(512)[:, :, 0]
        k = gaussian_kernel(sigma, 21)
        pad = 10
        blurred = fftconvolve(np.pad(board, pad, mode="edge"), k, mode="same")[
            pad:-pad, pad:-pad
        ]
        s = sfr_from_edge(simulate.knife_edge_patches(blurred)[0][:, :, 0], 32)
        freqs = sfr_frequencies(32)
        expected = np.exp(-2.0 * math.pi**2 * sigma**2 * freqs**2)
        sel = freqs <= 0.25
        assert np.max(np.abs(s[sel] - expected[sel])) <= 0.02

    def test_flat_patch_raises(self):
        with pytest.raises(QuantifyError):
            sfr_from_edge(np.full((64, 64), 0.5))


class TestFWHM:
    def test_gaussian_oracle(self):
        for sigma in (1.0, 2.0, 3.0):
            assert fwhm(gaussian_kernel(sigma)) == pytest.approx(
                2.3548 * sigma, rel=0.02
            )

    def test_cone_oracle(self):
        # radial cone of half-base b has FWHM exactly b
        b = 6.0
        ax = np.arange(31) - 15.0
        yy, xx = np.meshgrid(ax, ax)
        cone = np.clip(1.0 - np.hypot(xx, yy) / b, 0.0, None)
        assert fwhm(cone / cone.sum()) == pytest.approx(b, rel=0.01)

    def test_delta_floor(self):
        d = np.zeros((11, 11))
        d[5, 5] = 1.0
        assert 1.0 <= fwhm(d) <= 1.3

    def test_zero_kernel_raises(self):
        with pytest.raises(QuantifyError):
            fwhm(np.zeros((5, 5)))


class TestOIQ:
    def test_oiqe_bounds(self):
        s = np.linspace(1.0, 0.2, 32)
        assert oiqe(s, s) == pytest.approx(1.0)
        assert oiqe(0.5 * s, s) == pytest.approx(0.5)
        # target better than reference is clamped per frequency
        assert oiqe(2.0 * s, s) == pytest.approx(1.0)

    def test_oiq_exact_midpoint(self):
        assert oiq(25.0, 0.75, 0.5) == pytest.approx(0.5, abs=1e-12)

    def test_oiq_clamps(self):
        assert oiq(100.0, 1.5, 2.0) == pytest.approx(1.0)
        assert oiq(-5.0, 0.1, -1.0) == 0.0

    def test_severity_thresholds(self):
        assert severity_class(0.2) == "Strong"
        assert severity_class(1.0 / 3.0) == "Medium"
        assert severity_class(0.5) == "Medium"
        assert severity_class(2.0 / 3.0) == "Mild"
        assert severity_class(0.9) == "Mild"


class TestUniformity:
    def test_canonical_value(self):
        _, u_s = spatial_uniformity([0.8, 0.8, 0.8, 0.8, 0.4])
        assert u_s == pytest.approx(0.3292, abs=1e-3)

    def test_uniform_is_one(self):
        cv, u_s = spatial_uniformity([0.7] * 5)
        assert cv == 0.0 and u_s == 1.0

    def test_population_std(self):
        v = [0.4, 0.6]
        cv, _ = spatial_uniformity(v)
        assert cv == pytest.approx(0.1 / 0.5)

    def test_nonpositive_rejected(self):
        with pytest.raises(QuantifyError):
            spatial_uniformity([0.5, 0.0, 0.5, 0.5, 0.5])


class TestODClass:
    def test_canonical_vectors(self):
        assert [od_class(v) for v in CANONICAL_OD_VECTORS] == [0, 1, 5]

    def test_worst_at_center(self):
        assert od_class([0.2, 0.6, 0.7, 0.7, 0.6]) == 2

    def test_worst_at_interior(self):
        assert od_class([0.7, 0.6, 0.2, 0.6, 0.7]) == 3

    def test_center_peak_non_monotone(self):
        # peak at center, worst at periphery, but not monotone: class 4
        assert od_class([0.8, 0.4, 0.6, 0.5, 0.3]) == 4

    def test_alpha_controls_uniform(self):
        v = [0.8, 0.7, 0.6, 0.5, 0.4]
        assert od_class(v) != 0
        assert od_class(v, alpha=0.2) == 0

    def test_shape_guard(self):
        with pytest.raises(QuantifyError):
            od_class([0.5, 0.5, 0.5])

    @settings(max_examples=200, deadline=None)
    @given(
        v=st.lists(
            st.floats(0.01, 1.0, allow_nan=False), min_size=5, max_size=5
        )
    )
    def test_totality(self, v):
        assert od_class(v) in range(6)


class TestChromaticClass:
    def test_canonical(self):
        assert chromatic_class([0.9, 0.5, 0.2]) == 1

    def test_uniform_is_mildest(self):
        assert chromatic_class([0.6, 0.6, 0.6]) == 5

    def test_range(self):
        for v in ([0.9, 0.1, 0.1], [0.5, 0.45, 0.4], [0.3, 0.29, 0.31]):
            assert 1 <= chromatic_class(v) <= 5

    @settings(max_examples=100, deadline=None)
    @given(
        a=st.floats(0.05, 1.0),
        b=st.floats(0.05, 1.0),
        c=st.floats(0.05, 1.0),
    )
    def test_permutation_invariant(self, a, b, c):
        import itertools

        vals = {chromatic_class(p) for p in itertools.permutations((a, b, c))}
        assert len(vals) == 1


class TestReport:
    def test_roundtrip(self, tmp_path):
        rep = OIQReport(
            per_fov_oiq=[0.6, 0.55, 0.5, 0.45, 0.4],
            average_oiq=0.5,
            severity="Medium",
            cv=0.14,
            u_s=0.49,
            od_class=1,
            chromatic_class=3,
            per_channel_avg_oiq=[0.52, 0.5, 0.48],
        )
        path = tmp_path / "report.json"
        rep.save(path)
        back = OIQReport.load(path)
        assert back == rep
        assert back.subclass_key == "Mediumx1"
        # file is plain JSON
        json.loads(path.read_text())

    def test_quantify_lens_end_to_end(self, singlet, singlet_rgb):
        rep = quantify_lens(singlet, singlet_rgb)
        assert len(rep.per_fov_oiq) == 5
        assert all(0.0 <= v <= 1.0 for v in rep.per_fov_oiq)
        assert rep.average_oiq == pytest.approx(np.mean(rep.per_fov_oiq))
        assert rep.severity in ("Strong", "Medium", "Mild")
        assert rep.od_class in range(6)
        assert 1 <= rep.chromatic_class <= 5
        assert len(rep.per_channel_avg_oiq) == 3
        # a real singlet is worse off-axis than on-axis
        assert rep.per_fov_oiq[0] > rep.per_fov_oiq[-1]
