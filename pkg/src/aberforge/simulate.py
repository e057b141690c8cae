"""Patch-wise spatially-varying convolution and paired image synthesis.

Images are float32 arrays of shape (H, W, 3), linear light in [0, 1].
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .optics import Sensor
from .raytrace import RGBPSFSet

DEFAULT_PATCH = 64
DEFAULT_OVERLAP = 16
CHECKER_LOW = 0.05
CHECKER_HIGH = 0.95
CHECKER_TILT_DEG = 5.0
CHECKER_SQUARE = 256
KNIFE_EDGE_RADII = (0.0, 0.25, 0.5, 0.75, 0.95)
KNIFE_PATCH = 64


class SimulateError(ValueError):
    pass


def as_image(arr) -> np.ndarray:
    img = np.asarray(arr, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise SimulateError(f"expected (H, W, 3) image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise SimulateError("image contains non-finite values")
    return img


@dataclass(frozen=True)
class PatchLayout:
    """Tiling of an image into overlapping patches with per-patch FoV index.

    ``boxes`` are (y0, x0, y1, x1) half-open pixel spans; ``fov_index``
    assigns each patch the FoV whose image radius is nearest the patch
    center.
    """

    height: int
    width: int
    boxes: tuple
    fov_index: tuple
    patch: int
    overlap: int


def make_layout(
    height: int,
    width: int,
    psfs: RGBPSFSet,
    patch: int = DEFAULT_PATCH,
    overlap: int = DEFAULT_OVERLAP,
) -> PatchLayout:
    if overlap >= patch:
        raise SimulateError("overlap must be smaller than the patch size")
    stride = patch - overlap
    ys = list(range(0, max(height - overlap, 1), stride))
    xs = list(range(0, max(width - overlap, 1), stride))
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    radii_px = psfs.image_heights_mm / (psfs.pitch_um * 1e-3)
    boxes = []
    fovs = []
    for y0 in ys:
        for x0 in xs:
            y1 = min(y0 + patch, height)
            x1 = min(x0 + patch, width)
            pc_r = math.hypot((y0 + y1 - 1) / 2.0 - cy, (x0 + x1 - 1) / 2.0 - cx)
            fovs.append(int(np.argmin(np.abs(radii_px - pc_r))))
            boxes.append((y0, x0, y1, x1))
    return PatchLayout(height, width, tuple(boxes), tuple(fovs), patch, overlap)


def _blend_window(h: int, w: int, overlap: int) -> np.ndarray:
    """Separable linear ramp over the overlap margin."""
    def ramp(n):
        r = np.ones(n)
        m = min(overlap, n)
        edge = (np.arange(1, m + 1)) / (m + 1)
        r[:m] = edge
        r[n - m:] = np.minimum(r[n - m:], edge[::-1])
        return r

    return np.outer(ramp(h), ramp(w))


def render_degraded(
    clear: np.ndarray,
    psfs: RGBPSFSet,
    layout: PatchLayout | None = None,
    clamp: bool = True,
) -> np.ndarray:
    """Convolve each patch per channel with its assigned PSF kernel.

    Uses replicate boundary padding; overlapping patches are blended with
    a linear ramp window. Output is clamped to [0, 1] unless ``clamp`` is
    False (linearity tests).
    """
    img = as_image(clear)
    h, w = img.shape[:2]
    if layout is None:
        layout = make_layout(h, w, psfs)
    if (layout.height, layout.width) != (h, w):
        raise SimulateError(
            f"layout is {layout.height}x{layout.width}, image is {h}x{w}"
        )
    max_half = max(k.shape[0] // 2 for ch in psfs.kernels for k in ch)
    padded = np.pad(img, ((max_half, max_half), (max_half, max_half), (0, 0)), mode="edge")
    acc = np.zeros((h, w, 3), dtype=np.float64)
    wsum = np.zeros((h, w), dtype=np.float64)
    for box, fov in zip(layout.boxes, layout.fov_index):
        y0, x0, y1, x1 = box
        win = _blend_window(y1 - y0, x1 - x0, layout.overlap)
        kerns = psfs.kernels[fov]
        for ch in range(3):
            k = kerns[ch]
            kh = k.shape[0] // 2
            region = padded[
                y0 + max_half - kh : y1 + max_half + kh,
                x0 + max_half - kh : x1 + max_half + kh,
                ch,
            ]
            conv = fftconvolve(region.astype(np.float64), k, mode="valid")
            acc[y0:y1, x0:x1, ch] += win * conv
        wsum[y0:y1, x0:x1] += win
    out = acc / wsum[:, :, None]
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def add_sensor_noise(
    img: np.ndarray, read_sigma: float, shot_scale: float, seed: int
) -> np.ndarray:
    """Signal-dependent Gaussian shot noise plus additive read noise.

    Per-pixel variance is shot_scale·I + read_sigma²; deterministic under
    a fixed seed; output clamped to [0, 1].
    """
    if read_sigma < 0 or shot_scale < 0:
        raise SimulateError("noise parameters must be nonnegative")
    x = as_image(img)
    if read_sigma == 0 and shot_scale == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(shot_scale * np.clip(x, 0.0, None) + read_sigma**2)
    noisy = x + rng.standard_normal(x.shape, dtype=np.float32) * sigma.astype(np.float32)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Slanted-edge checkerboard target

def checkerboard(
    resolution: int,
    square: int = CHECKER_SQUARE,
    tilt_deg: float = CHECKER_TILT_DEG,
    low: float = CHECKER_LOW,
    high: float = CHECKER_HIGH,
) -> np.ndarray:
    """Two-level checkerboard rotated by tilt_deg about the image center."""
    c = (resolution - 1) / 2.0
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    th = math.radians(tilt_deg)
    u = (xx - c) * math.cos(th) + (yy - c) * math.sin(th)
    v = -(xx - c) * math.sin(th) + (yy - c) * math.cos(th)
    parity = (np.floor(u / square) + np.floor(v / square)).astype(np.int64) % 2
    img = np.where(parity == 0, high, low).astype(np.float32)
    return np.repeat(img[:, :, None], 3, axis=2)


def render_checkerboard(sensor: Sensor, psfs: RGBPSFSet, **checker_kwargs):
    """Slanted-edge checkerboard GT and its degraded rendering."""
    gt = checkerboard(sensor.resolution, **checker_kwargs)
    degraded = render_degraded(gt, psfs)
    return degraded, gt


def knife_edge_positions(
    resolution: int,
    square: int = CHECKER_SQUARE,
    tilt_deg: float = CHECKER_TILT_DEG,
    radii=KNIFE_EDGE_RADII,
    patch: int = KNIFE_PATCH,
):
    """Deterministic patch centers on near-vertical checkerboard edges.

    For each target radius (as a fraction of the half-diagonal) the nearest
    point of the form (u = k·square, v = (m+0.5)·square) in the rotated
    frame is chosen: the middle of a vertical-edge segment, away from
    corners.
    """
    c = (resolution - 1) / 2.0
    half_diag = resolution * math.sqrt(2.0) / 2.0
    th = math.radians(tilt_deg)
    centers = []
    k_max = int(resolution / square) + 2
    candidates = []
    for k in range(-k_max, k_max + 1):
        for m in range(-k_max, k_max + 1):
            u, v = k * square, (m + 0.5) * square
            x = c + u * math.cos(th) - v * math.sin(th)
            y = c + u * math.sin(th) + v * math.cos(th)
            half = patch // 2
            if half <= x < resolution - half and half <= y < resolution - half:
                candidates.append((x, y, math.hypot(x - c, y - c)))
    if not candidates:
        raise SimulateError("checkerboard too coarse for knife-edge extraction")
    for frac in radii:
        target = frac * half_diag
        x, y, _ = min(candidates, key=lambda p: abs(p[2] - target))
        centers.append((int(round(y)), int(round(x))))
    return centers


def knife_edge_patches(
    img: np.ndarray,
    square: int = CHECKER_SQUARE,
    tilt_deg: float = CHECKER_TILT_DEG,
    radii=KNIFE_EDGE_RADII,
    patch: int = KNIFE_PATCH,
):
    """Crop the five slanted-edge patches, ordered center to periphery."""
    x = as_image(img)
    res = x.shape[0]
    half = patch // 2
    out = []
    for cy, cx in knife_edge_positions(res, square, tilt_deg, radii, patch):
        y0, x0 = cy - half, cx - half
        if y0 < 0 or x0 < 0 or y0 + patch > res or x0 + patch > x.shape[1]:
            raise SimulateError(f"knife-edge patch at ({cy}, {cx}) falls off the image")
        out.append(x[y0 : y0 + patch, x0 : x0 + patch].copy())
    return out


# ---------------------------------------------------------------------------
# Image file I/O: 8-bit PNG for display, 32-bit float PFM for metrics

def save_image(path, img: np.ndarray) -> None:
    p = str(path)
    x = as_image(img)
    if p.lower().endswith(".png"):
        from PIL import Image

        arr = np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr).save(p)
    elif p.lower().endswith(".pfm"):
        with open(p, "wb") as f:
            f.write(b"PF\n")
            f.write(f"{x.shape[1]} {x.shape[0]}\n".encode())
            f.write(b"-1.0\n")  # little-endian
            f.write(np.flipud(x).astype("<f4").tobytes())
    else:
        raise SimulateError(f"unsupported image extension: {p}")


def load_image(path) -> np.ndarray:
    p = str(path)
    if p.lower().endswith(".png"):
        from PIL import Image

        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
        return arr
    if p.lower().endswith(".pfm"):
        with open(p, "rb") as f:
            if f.readline().strip() != b"PF":
                raise SimulateError("not a color PFM file")
            w, h = map(int, f.readline().split())
            scale = float(f.readline())
            data = np.frombuffer(f.read(w * h * 3 * 4), "<f4" if scale < 0 else ">f4")
            return np.flipud(data.reshape(h, w, 3)).astype(np.float32)
    raise SimulateError(f"unsupported image extension: {p}")
