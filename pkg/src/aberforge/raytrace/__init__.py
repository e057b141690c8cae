"""Sequential exact ray tracing, spot statistics, and PSF synthesis.

The hot per-ray trace loop lives in a compiled Cython kernel
(``_trace_cy``) with a vectorized NumPy fallback (``_trace_np``); the
backend is selected at import time and can be forced with the
ABERFORGE_BACKEND environment variable ("cython" or "numpy").
"""
from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..optics import (
    IdealLens,
    LensSystem,
    OpticsError,
    Surface,
    entrance_pupil,
    refractive_index,
    surface_sag,
    surface_sag_slope,
)
from . import _trace_np

_FORCED = os.environ.get("ABERFORGE_BACKEND", "").lower()
if _FORCED == "numpy":
    _kernel = _trace_np
else:
    try:
        from . import _trace_cy as _kernel  # type: ignore[no-redef]
    except ImportError:
        if _FORCED == "cython":
            raise
        _kernel = _trace_np


def backend_name() -> str:
    """Name of the active trace kernel: 'cython' or 'numpy'."""
    return "cython" if _kernel.__name__.endswith("_trace_cy") else "numpy"


STATUS_ALIVE = _trace_np.STATUS_ALIVE
STATUS_VIGNETTED = _trace_np.STATUS_VIGNETTED
STATUS_TIR = _trace_np.STATUS_TIR
STATUS_NUMERICAL = _trace_np.STATUS_NUMERICAL

PSFG_MAGIC = b"PSFG"
PSFG_VERSION = 1

# Band of the 31-sample visible sweep (nm).
WAVE_MIN = 400.0
WAVE_MAX = 700.0


class RaytraceError(ValueError):
    """Raised for trace failures (empty spots, TIR where forbidden, ...)."""


class TotalInternalReflection(RaytraceError):
    pass


def refract(direction, normal, n1: float, n2: float):
    """Refract a unit direction at a surface with unit normal (vector Snell).

    The normal may point either way; it is re-oriented along propagation.
    Raises TotalInternalReflection past the critical angle.
    """
    d = np.asarray(direction, dtype=float)
    n = np.asarray(normal, dtype=float)
    if np.dot(d, n) < 0:
        n = -n
    cosi = float(np.dot(d, n))
    eta = n1 / n2
    sin2t = eta * eta * (1.0 - cosi * cosi)
    if sin2t > 1.0:
        raise TotalInternalReflection(
            f"TIR: n1={n1}, n2={n2}, incidence {math.degrees(math.acos(min(cosi, 1.0))):.3f} deg"
        )
    cost = math.sqrt(1.0 - sin2t)
    out = eta * d - (eta * cosi - cost) * n
    return out / np.linalg.norm(out)


def intersect(origin, direction, surface: Surface, vertex_z: float):
    """Intersection point of one ray with a surface at the given vertex z.

    Spherical surfaces are solved in closed form; conics/aspherics by
    damped Newton iteration (|residual| <= 1e-10 mm, max 50 iterations).
    Raises RaytraceError on a miss, vignette, or non-convergence.
    """
    p = np.asarray(origin, dtype=float)
    d = np.asarray(direction, dtype=float)
    c, k = surface.curvature, surface.conic

    if c == 0.0 and not any(surface.aspheric):
        if d[2] == 0.0:
            raise RaytraceError("ray parallel to flat surface")
        t = (vertex_z - p[2]) / d[2]
    elif k == 0.0 and not any(surface.aspheric):
        rad = 1.0 / c
        oc = p - np.array([0.0, 0.0, vertex_z + rad])
        b = 2.0 * float(np.dot(d, oc))
        cq = float(np.dot(oc, oc)) - rad * rad
        disc = b * b - 4.0 * cq
        if disc < 0:
            raise RaytraceError("ray misses spherical surface")
        sq = math.sqrt(disc)
        t1, t2 = (-b - sq) / 2.0, (-b + sq) / 2.0
        z1, z2 = p[2] + t1 * d[2], p[2] + t2 * d[2]
        t = t1 if abs(z1 - vertex_z) <= abs(z2 - vertex_z) else t2
        if t <= 1e-9:
            t = t2 if t == t1 else t1
    else:
        if d[2] == 0.0:
            raise RaytraceError("ray parallel to surface axis")
        t = (vertex_z - p[2]) / d[2]
        g_prev = math.inf
        for _ in range(50):
            hit = p + t * d
            r2 = hit[0] ** 2 + hit[1] ** 2
            if (1.0 + k) * c * c * r2 > 1.0:
                raise RaytraceError("ray outside valid conic domain")
            g = hit[2] - vertex_z - surface_sag(surface, math.sqrt(r2))
            if abs(g) <= 1e-10:
                break
            r = max(math.sqrt(r2), 1e-150)
            slope = surface_sag_slope(surface, r)
            gp = d[2] - slope * (hit[0] * d[0] + hit[1] * d[1]) / r
            step = g / gp if abs(gp) > 1e-14 else math.copysign(1e-3, g)
            if abs(g) > g_prev:
                step *= 0.5
            g_prev = abs(g)
            t -= step
        else:
            raise RaytraceError("Newton intersection did not converge in 50 iterations")
    if t <= 1e-9:
        raise RaytraceError("surface behind ray")
    hit = p + t * d
    if math.hypot(hit[0], hit[1]) > surface.semi_diameter:
        raise RaytraceError("ray vignetted (beyond semi-diameter)")
    return hit


@dataclass(frozen=True)
class TraceResult:
    """Surviving image-plane spot points plus energy accounting."""

    spots: np.ndarray  # (M, 2) mm
    chief: np.ndarray  # (2,) mm, pupil-center ray landing point
    survival_fraction: float
    vignetted_fraction: float
    tir_fraction: float


def _pupil_points(n_samples: int, pattern: str) -> np.ndarray:
    """Unit-disk sample points; index 0 is always the pupil center."""
    if pattern == "grid":
        n = max(int(math.ceil(math.sqrt(n_samples))), 1)
        ax = np.linspace(-1.0, 1.0, n) if n > 1 else np.array([0.0])
        u, v = np.meshgrid(ax, ax)
        pts = np.stack([u.ravel(), v.ravel()], axis=1)
        pts = pts[(pts**2).sum(axis=1) <= 1.0 + 1e-12]
    elif pattern == "ring":
        n_rings = max(int(round(math.sqrt(n_samples / math.pi))), 1)
        pts_list = []
        for i in range(1, n_rings + 1):
            rho = i / n_rings
            m = max(int(round(2 * math.pi * rho * n_rings)), 1)
            th = np.arange(m) * 2 * math.pi / m
            pts_list.append(np.stack([rho * np.cos(th), rho * np.sin(th)], axis=1))
        pts = np.concatenate(pts_list, axis=0)
    else:
        raise RaytraceError(f"unknown pupil pattern {pattern!r}")
    return np.concatenate([np.zeros((1, 2)), pts], axis=0)


def _surface_arrays(lens: LensSystem):
    surfs = [s for s in lens.surfaces]
    kinds = np.array([0 if s.kind in ("spherical", "aspheric") else 1 for s in surfs], dtype=np.int8)
    c = np.array([s.curvature for s in surfs])
    kappa = np.array([s.conic for s in surfs])
    asph = np.zeros((len(surfs), 4))
    for i, s in enumerate(surfs):
        for j, a in enumerate(s.aspheric):
            asph[i, j] = a
    semidiam = np.array([s.semi_diameter for s in surfs])
    zv = np.array(lens.vertex_positions)
    return kinds, c, kappa, asph, semidiam, zv


def _eta_table(lens: LensSystem, wavelengths: np.ndarray) -> np.ndarray:
    """n1/n2 per (surface, wavelength)."""
    n_surf = len(lens.surfaces)
    eta = np.ones((n_surf, len(wavelengths)))
    for j, lam in enumerate(wavelengths):
        n_before = 1.0
        for i, s in enumerate(lens.surfaces):
            if s.kind in ("spherical", "aspheric"):
                n_after = refractive_index(s.material, float(lam))
                eta[i, j] = n_before / n_after
                n_before = n_after
    return eta


def _launch_rays(lens: LensSystem, field_angle_deg: float, pupil_xy: np.ndarray):
    theta = math.radians(field_angle_deg)
    d = np.array([0.0, math.sin(theta), math.cos(theta)])
    z_ep, _ = entrance_pupil(lens)
    z0 = min(0.0, z_ep) - 10.0
    back = (z_ep - z0) / d[2]
    origins = np.empty((len(pupil_xy), 3))
    origins[:, 0] = pupil_xy[:, 0] - back * d[0]
    origins[:, 1] = pupil_xy[:, 1] - back * d[1]
    origins[:, 2] = z0
    dirs = np.broadcast_to(d, (len(pupil_xy), 3)).copy()
    return origins, dirs


def trace_system(
    lens,
    field_angle_deg: float,
    wavelength_nm: float,
    pupil_samples: int = 256,
    pattern: str = "grid",
) -> TraceResult:
    """Trace a field bundle to the image plane and return surviving spots."""
    if abs(field_angle_deg) > lens.half_fov_deg + 1e-9:
        raise RaytraceError(
            f"field angle {field_angle_deg} exceeds half-FoV {lens.half_fov_deg}"
        )
    if isinstance(lens, IdealLens):
        y = lens.efl * math.tan(math.radians(field_angle_deg))
        m = max(pupil_samples, 1)
        spots = np.tile([0.0, y], (m, 1))
        return TraceResult(spots, np.array([0.0, y]), 1.0, 0.0, 0.0)

    pupil = _pupil_points(pupil_samples, pattern) * lens.entrance_pupil_radius
    origins, dirs = _launch_rays(lens, field_angle_deg, pupil)
    kinds, c, kappa, asph, semidiam, zv = _surface_arrays(lens)
    eta_w = _eta_table(lens, np.array([wavelength_nm]))[:, 0]
    eta = np.repeat(eta_w[:, None], len(pupil), axis=1)
    points, status = _kernel.trace_batch(
        origins, dirs, kinds, c, kappa, asph, semidiam, zv, eta, lens.image_plane_z
    )
    alive = status == STATUS_ALIVE
    n = len(status)
    if not alive.any():
        raise RaytraceError(
            f"all rays dead at field {field_angle_deg} deg, {wavelength_nm} nm"
        )
    chief = points[0] if alive[0] else points[alive][0]
    return TraceResult(
        spots=points[alive],
        chief=chief,
        survival_fraction=float(alive.sum()) / n,
        vignetted_fraction=float((status == STATUS_VIGNETTED).sum()) / n,
        tir_fraction=float((status == STATUS_TIR).sum()) / n,
    )


def rms_spot_radius(spots) -> float:
    """RMS radial distance about the spot centroid, in µm."""
    pts = np.asarray(spots, dtype=float)
    if pts.size == 0:
        raise RaytraceError("empty spot list")
    centered = pts - pts.mean(axis=0)
    return float(np.sqrt((centered**2).sum(axis=1).mean())) * 1e3


# ---------------------------------------------------------------------------
# PSF synthesis

MAX_KERNEL_SIDE = 65
ENERGY_COVERAGE = 0.999


@dataclass
class PSFGrid:
    """Geometric PSF kernels over a field-of-view × wavelength grid.

    Kernels at one FoV share a common origin: the chief-ray landing point
    of the middle wavelength. ``centroid_offsets[f, w]`` is the chief-ray
    offset of wavelength w from that origin, in pixels.
    """

    field_angles: np.ndarray  # (n_fov,) degrees
    wavelengths: np.ndarray  # (n_wave,) nm
    kernels: list  # kernels[f][w]: (side, side) float64, unit sum
    centroid_offsets: np.ndarray  # (n_fov, n_wave, 2) pixels
    image_heights_mm: np.ndarray  # (n_fov,) chief radial height at reference λ
    pitch_um: float

    @property
    def n_fov(self) -> int:
        return len(self.field_angles)

    @property
    def n_wave(self) -> int:
        return len(self.wavelengths)


@dataclass
class RGBPSFSet:
    """Per-FoV response-weighted RGB kernels, each normalized to unit sum."""

    field_angles: np.ndarray
    kernels: list  # kernels[f][ch]: (side, side) float64
    image_heights_mm: np.ndarray
    pitch_um: float

    @property
    def n_fov(self) -> int:
        return len(self.field_angles)


def _bin_kernel(offsets_px: np.ndarray):
    """Bin spot offsets (pixels, relative to the kernel origin) into the
    smallest odd square covering 99.9% of energy, capped at 65×65."""
    ix = np.rint(offsets_px[:, 0]).astype(np.int64)
    iy = np.rint(offsets_px[:, 1]).astype(np.int64)
    cheb = np.maximum(np.abs(ix), np.abs(iy))
    order = np.sort(cheb)
    n = len(order)
    need = order[min(int(math.ceil(ENERGY_COVERAGE * n)) - 1, n - 1)]
    half = int(min(need, (MAX_KERNEL_SIDE - 1) // 2))
    side = 2 * half + 1
    keep = cheb <= half
    kern = np.zeros((side, side))
    np.add.at(kern, (iy[keep] + half, ix[keep] + half), 1.0)
    total = kern.sum()
    if total == 0:
        raise RaytraceError("no rays landed inside the kernel support")
    kern /= total
    ys, xs = np.mgrid[-half : half + 1, -half : half + 1]
    centroid = np.array([(kern * xs).sum(), (kern * ys).sum()])
    return kern, centroid


def psf_grid(
    lens,
    n_fov: int = 64,
    n_wave: int = 31,
    rays_per_psf: int = 10_000,
    pattern: str = "grid",
    threads: int | None = None,
) -> PSFGrid:
    """Trace the lens over n_fov × n_wave cells and bin PSF kernels at the
    matched sensor's pixel pitch."""
    sensor = lens.sensor
    if sensor is None:
        raise RaytraceError("lens has no matched sensor; run match_sensor first")
    field_angles = np.linspace(0.0, lens.half_fov_deg, n_fov)
    wavelengths = np.linspace(WAVE_MIN, WAVE_MAX, n_wave)
    pitch_mm = sensor.pitch_um * 1e-3
    ref_w = n_wave // 2

    if isinstance(lens, IdealLens):
        kernels = []
        heights = lens.efl * np.tan(np.radians(field_angles))
        for _ in range(n_fov):
            kernels.append([np.ones((1, 1)) for _ in range(n_wave)])
        offsets = np.zeros((n_fov, n_wave, 2), dtype=np.float32)
        return PSFGrid(field_angles, wavelengths, kernels, offsets, heights, sensor.pitch_um)

    pupil = _pupil_points(rays_per_psf, pattern) * lens.entrance_pupil_radius
    n_pup = len(pupil)
    kinds, c, kappa, asph, semidiam, zv = _surface_arrays(lens)
    eta_w = _eta_table(lens, wavelengths)  # (S, n_wave)
    image_z = lens.image_plane_z

    def run_fov(f):
        origins, dirs = _launch_rays(lens, float(field_angles[f]), pupil)
        origins_all = np.tile(origins, (n_wave, 1))
        dirs_all = np.tile(dirs, (n_wave, 1))
        eta = np.repeat(eta_w, n_pup, axis=1)
        points, status = _kernel.trace_batch(
            origins_all, dirs_all, kinds, c, kappa, asph, semidiam, zv, eta, image_z
        )
        points = points.reshape(n_wave, n_pup, 2)
        status = status.reshape(n_wave, n_pup)
        if not (status[ref_w] == STATUS_ALIVE).any():
            raise RaytraceError(f"all rays dead at fov index {f} (reference wavelength)")
        ref_alive = status[ref_w] == STATUS_ALIVE
        ref_chief = points[ref_w, 0] if ref_alive[0] else points[ref_w][ref_alive][0]
        cell_kernels = []
        cell_offsets = np.zeros((n_wave, 2), dtype=np.float32)
        for w in range(n_wave):
            alive = status[w] == STATUS_ALIVE
            if not alive.any():
                raise RaytraceError(f"all rays dead at cell (fov={f}, wave={w})")
            chief = points[w, 0] if alive[0] else points[w][alive][0]
            offs = (points[w][alive] - ref_chief) / pitch_mm
            kern, _ = _bin_kernel(offs)
            cell_kernels.append(kern)
            cell_offsets[w] = (chief - ref_chief) / pitch_mm
        return cell_kernels, cell_offsets, float(math.hypot(*ref_chief))

    kernels = [None] * n_fov
    offsets = np.zeros((n_fov, n_wave, 2), dtype=np.float32)
    heights = np.zeros(n_fov)
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run_fov, range(n_fov)))
    else:
        results = [run_fov(f) for f in range(n_fov)]
    for f, (ck, co, h) in enumerate(results):
        kernels[f] = ck
        offsets[f] = co
        heights[f] = h
    return PSFGrid(field_angles, wavelengths, kernels, offsets, heights, sensor.pitch_um)


def default_rgb_response(wavelengths=None) -> np.ndarray:
    """Raised-cosine RGB wavelength response, columns normalized to sum 1.

    Channels centered at 620/540/460 nm (R/G/B order in columns 0/1/2),
    half-width 100 nm. Placeholder for an unspecified sensor response;
    fully configurable at the stack_rgb call site.
    """
    if wavelengths is None:
        wavelengths = np.linspace(WAVE_MIN, WAVE_MAX, 31)
    lam = np.asarray(wavelengths, dtype=float)
    centers = (620.0, 540.0, 460.0)
    width = 100.0
    resp = np.zeros((len(lam), 3))
    for ch, c0 in enumerate(centers):
        x = np.abs(lam - c0) / width
        resp[:, ch] = np.where(x <= 1.0, 0.5 * (1.0 + np.cos(np.pi * x)), 0.0)
    return resp / resp.sum(axis=0, keepdims=True)


def stack_rgb(grid: PSFGrid, response: np.ndarray | None = None) -> RGBPSFSet:
    """Response-weighted stack of per-wavelength kernels into RGB kernels."""
    if response is None:
        response = default_rgb_response(grid.wavelengths)
    response = np.asarray(response, dtype=float)
    if response.shape != (grid.n_wave, 3):
        raise RaytraceError(
            f"response must be ({grid.n_wave}, 3), got {response.shape}"
        )
    col_sums = response.sum(axis=0)
    if np.any(col_sums <= 0):
        raise RaytraceError("response has an all-zero channel column")
    response = response / col_sums

    out_kernels = []
    for f in range(grid.n_fov):
        sides = [k.shape[0] for k in grid.kernels[f]]
        side = max(sides)
        acc = np.zeros((3, side, side))
        for w in range(grid.n_wave):
            k = grid.kernels[f][w]
            pad = (side - k.shape[0]) // 2
            kp = np.pad(k, pad) if pad else k
            for ch in range(3):
                acc[ch] += response[w, ch] * kp
        chans = []
        for ch in range(3):
            s = acc[ch].sum()
            if s <= 0:
                raise RaytraceError(f"channel {ch} kernel has zero energy at fov {f}")
            chans.append(acc[ch] / s)
        out_kernels.append(chans)
    return RGBPSFSet(
        grid.field_angles.copy(), out_kernels, grid.image_heights_mm.copy(), grid.pitch_um
    )


# ---------------------------------------------------------------------------
# PSF grid binary container ("PSFG"; "PSFM" variant reused for PSF maps)

def save_psf_grid(grid: PSFGrid, path) -> None:
    with open(path, "wb") as f:
        max_side = max(k.shape[0] for row in grid.kernels for k in row)
        f.write(PSFG_MAGIC)
        f.write(struct.pack("<H", PSFG_VERSION))
        f.write(struct.pack("<III", grid.n_fov, grid.n_wave, max_side))
        f.write(np.asarray(grid.field_angles, "<f8").tobytes())
        f.write(np.asarray(grid.wavelengths, "<f8").tobytes())
        f.write(np.asarray(grid.image_heights_mm, "<f8").tobytes())
        f.write(struct.pack("<d", grid.pitch_um))
        for fi in range(grid.n_fov):
            for w in range(grid.n_wave):
                k = grid.kernels[fi][w]
                f.write(struct.pack("<H", k.shape[0]))
                f.write(np.asarray(grid.centroid_offsets[fi, w], "<f4").tobytes())
                f.write(np.asarray(k, "<f4").tobytes())


def load_psf_grid(path) -> PSFGrid:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PSFG_MAGIC:
            raise RaytraceError(f"bad magic {magic!r}, expected {PSFG_MAGIC!r}")
        (version,) = struct.unpack("<H", f.read(2))
        if version != PSFG_VERSION:
            raise RaytraceError(f"unsupported PSF grid version {version}")
        n_fov, n_wave, _max_side = struct.unpack("<III", f.read(12))
        field_angles = np.frombuffer(f.read(8 * n_fov), "<f8").copy()
        wavelengths = np.frombuffer(f.read(8 * n_wave), "<f8").copy()
        heights = np.frombuffer(f.read(8 * n_fov), "<f8").copy()
        (pitch_um,) = struct.unpack("<d", f.read(8))
        kernels = []
        offsets = np.zeros((n_fov, n_wave, 2), dtype=np.float32)
        for fi in range(n_fov):
            row = []
            for w in range(n_wave):
                (side,) = struct.unpack("<H", f.read(2))
                offsets[fi, w] = np.frombuffer(f.read(8), "<f4")
                k = np.frombuffer(f.read(4 * side * side), "<f4").reshape(side, side)
                row.append(k.astype(np.float64))
            kernels.append(row)
    return PSFGrid(field_angles, wavelengths, kernels, offsets, heights, pitch_um)
