import math

import numpy as np
import pytest
from scipy.signal import fftconvolve

from aberforge import simulate
from aberforge.raytrace import RGBPSFSet
from aberforge.simulate import (
    SimulateError,
    add_sensor_noise,
    as_image,
    checkerboard,
    knife_edge_patches,
    knife_edge_positions,
    load_image,
    make_layout,
    render_checkerboard,
    render_degraded,
    save_image,
)

from conftest import gaussian_kernel


def uniform_psfs(kernel: np.ndarray) -> RGBPSFSet:
    """A single-FoV PSF set: the same kernel in every channel everywhere."""
    return RGBPSFSet(
        field_angles=np.array([0.0]),
        kernels=[[kernel, kernel, kernel]],
        image_heights_mm=np.array([0.0]),
        pitch_um=8.0,
    )


class TestAsImage:
    def test_accepts_hw3(self):
        img = as_image(np.zeros((4, 4, 3)))
        assert img.dtype == np.float32

    def test_promotes_grayscale(self):
        assert as_image(np.zeros((4, 4))).shape == (4, 4, 3)

    def test_rejects_other_shapes(self):
        with pytest.raises(SimulateError):
            as_image(np.zeros((4, 4, 2)))
        with pytest.raises(SimulateError):
            as_image(np.full((4, 4, 3), np.nan))


class TestRenderDegraded:
    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        img = rng.random((96, 96, 3))
        out = render_degraded(img, uniform_psfs(np.ones((1, 1))))
        np.testing.assert_allclose(out, img.astype(np.float32), atol=1e-6)

    def test_matches_dense_convolution(self):
        # with a single spatially uniform PSF, patch blending must reduce
        # to plain convolution with replicate padding
        rng = np.random.default_rng(2)
        img = rng.random((512, 512, 3))
        k = gaussian_kernel(1.5, 21)
        out = render_degraded(img, uniform_psfs(k))
        pad = 10
        ref = np.stack(
            [
                fftconvolve(np.pad(img[:, :, c], pad, mode="edge"), k, mode="same")[
                    pad:-pad, pad:-pad
                ]
                for c in range(3)
            ],
            axis=-1,
        )
        assert np.max(np.abs(out - ref)) <= 1e-5

    def test_energy_preserved_on_constant(self):
        img = np.full((128, 128, 3), 0.6)
        out = render_degraded(img, uniform_psfs(gaussian_kernel(2.0, 15)))
        np.testing.assert_allclose(out, 0.6, atol=1e-5)

    def test_layout_covers_image(self, singlet_rgb):
        layout = make_layout(200, 300, singlet_rgb)
        cover = np.zeros((200, 300), dtype=int)
        for y0, x0, y1, x1 in layout.boxes:
            cover[y0:y1, x0:x1] += 1
        assert cover.min() >= 1
        assert len(layout.fov_index) == len(layout.boxes)
        assert all(0 <= f < singlet_rgb.n_fov for f in layout.fov_index)

    def test_overlap_guard(self, singlet_rgb):
        with pytest.raises(SimulateError):
            make_layout(100, 100, singlet_rgb, patch=32, overlap=32)


class TestSensorNoise:
    def test_deterministic(self):
        img = np.full((32, 32, 3), 0.5)
        a = add_sensor_noise(img, 0.01, 0.002, seed=7)
        b = add_sensor_noise(img, 0.01, 0.002, seed=7)
        np.testing.assert_array_equal(a, b)
        c = add_sensor_noise(img, 0.01, 0.002, seed=8)
        assert not np.array_equal(a, c)

    def test_clipped(self):
        img = np.full((64, 64, 3), 0.98)
        out = add_sensor_noise(img, 0.2, 0.1, seed=0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_zero_noise_is_identity(self):
        img = np.random.default_rng(0).random((16, 16, 3))
        np.testing.assert_array_equal(
            add_sensor_noise(img, 0.0, 0.0, seed=0), img.astype(np.float32)
        )

    def test_signal_dependence(self):
        rng_img = np.concatenate(
            [np.full((64, 64, 3), 0.05), np.full((64, 64, 3), 0.9)], axis=0
        )
        out = add_sensor_noise(rng_img, 0.0, 0.05, seed=3)
        res = out - rng_img
        assert res[64:].std() > res[:64].std()

    def test_negative_params_rejected(self):
        with pytest.raises(SimulateError):
            add_sensor_noise(np.zeros((4, 4, 3)), -0.1, 0.0, seed=0)


class TestCheckerboard:
    def test_two_levels(self):
        board = checkerboard(512)
        assert board.shape == (512, 512, 3)
        assert set(np.unique(board)) == {np.float32(0.05), np.float32(0.95)}

    def test_edges_are_slanted(self):
        # a tilted board must not have any purely uniform rows or columns
        board = checkerboard(1024)[:, :, 0]
        col_var = board.var(axis=0)
        assert (col_var > 0).mean() > 0.95

    def test_knife_edge_positions(self):
        centers = knife_edge_positions(2048)
        assert len(centers) == 5
        c = (2048 - 1) / 2.0
        half_diag = 2048 * math.sqrt(2.0) / 2.0
        radii = [math.hypot(y - c, x - c) / half_diag for y, x in centers]
        targets = (0.0, 0.25, 0.5, 0.75, 0.95)
        for got, want in zip(radii, targets):
            assert got == pytest.approx(want, abs=0.15)

    def test_knife_edge_patches(self):
        board = checkerboard(2048)
        patches = knife_edge_patches(board)
        assert len(patches) == 5
        for p in patches:
            assert p.shape == (64, 64, 3)
            # every patch must contain a real edge
            assert p.max() - p.min() > 0.5

    def test_render_checkerboard(self, singlet, singlet_rgb):
        degraded, gt = render_checkerboard(singlet.sensor, singlet_rgb)
        assert degraded.shape == gt.shape == (2048, 2048, 3)
        assert np.abs(degraded - gt).max() > 0.01


class TestImageIO:
    def test_pfm_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).random((37, 21, 3)).astype(np.float32)
        path = tmp_path / "img.pfm"
        save_image(path, img)
        np.testing.assert_array_equal(load_image(path), img)

    def test_png_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
        path = tmp_path / "img.png"
        save_image(path, img)
        back = load_image(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-6
