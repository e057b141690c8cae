"""Optical image quality stack: fidelity metrics, SFR/MTF, FWHM, OIQ score,
severity binning, spatial uniformity, OD-Class, and chromatic class."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from skimage.metrics import structural_similarity

from .optics import LensSystem
from .raytrace import RGBPSFSet
from . import simulate

PSNR_CAP_DB = 60.0
DEFAULT_ALPHA = 0.8
DEFAULT_NP = 32
SEVERITY_THRESHOLDS = (1.0 / 3.0, 2.0 / 3.0)
SEVERITY_NAMES = ("Strong", "Medium", "Mild")
MONOTONE_TOL = 0.01

# Reference per-FoV OIQ profiles: uniform, center-peaked monotone falloff,
# and interior-peaked with a degraded periphery. They classify to 0, 1, 5.
CANONICAL_OD_VECTORS = (
    (0.8, 0.8, 0.8, 0.8, 0.8),
    (0.8, 0.7, 0.6, 0.5, 0.4),
    (0.5, 0.8, 0.7, 0.6, 0.3),
)
OIQE_CUTOFF = 0.25  # half-Nyquist, cyc/px


class QuantifyError(ValueError):
    pass


def sfr_frequencies(n_p: int = DEFAULT_NP) -> np.ndarray:
    """n_p uniform frequency samples over [0, Nyquist] in cyc/px."""
    return np.linspace(0.0, 0.5, n_p)


def psnr(img, ref, cap_db: float = PSNR_CAP_DB) -> float:
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise QuantifyError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return cap_db
    return min(10.0 * math.log10(1.0 / mse), cap_db)


def ssim(img, ref) -> float:
    a = np.asarray(img, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise QuantifyError(f"shape mismatch {a.shape} vs {b.shape}")
    kwargs = dict(
        data_range=1.0, gaussian_weights=True, sigma=1.5, win_size=11,
        K1=0.01, K2=0.03,
    )
    if a.ndim == 3:
        kwargs["channel_axis"] = 2
    return float(structural_similarity(a, b, **kwargs))


def fidelity_metrics(img, ref) -> tuple[float, float]:
    """(PSNR dB on peak 1.0 capped at 60, SSIM with 11-tap Gaussian window)."""
    return psnr(img, ref), ssim(img, ref)


def mtf_from_psf(kernel, n_p: int = DEFAULT_NP) -> np.ndarray:
    """SFR of a PSF kernel along the tangential (horizontal) axis.

    Magnitude of the line-spread DTFT, normalized so SFR(0) = 1, sampled
    at n_p uniform frequencies over [0, Nyquist].
    """
    k = np.asarray(kernel, dtype=np.float64)
    if k.sum() <= 0:
        raise QuantifyError("zero kernel")
    lsf = k.sum(axis=0)
    x = np.arange(len(lsf)) - (len(lsf) - 1) / 2.0
    freqs = sfr_frequencies(n_p)
    spectrum = np.abs(np.exp(-2j * np.pi * freqs[:, None] * x[None, :]) @ lsf)
    return spectrum / spectrum[0]


def sfr_from_edge(patch, n_p: int = DEFAULT_NP, oversample: int = 4) -> np.ndarray:
    """Slanted-edge SFR: per-row edge location, 4x-oversampled edge spread,
    derivative to line spread, windowed DTFT normalized at DC.

    The finite-difference derivative and bin-averaging responses are
    compensated. Accepts a 2D patch (or 3D, averaged over channels) with
    one near-vertical edge.
    """
    p = np.asarray(patch, dtype=np.float64)
    if p.ndim == 3:
        p = p.mean(axis=2)
    if p.max() - p.min() < 0.1:
        raise QuantifyError("no detectable edge (contrast < 0.1)")
    h, w = p.shape

    rows = []
    locs = []
    for y in range(h):
        d = np.abs(np.diff(p[y]))
        s = d.sum()
        if s < 1e-9:
            continue
        rows.append(y)
        locs.append(float(np.sum((np.arange(w - 1) + 0.5) * d) / s))
    if len(rows) < 4:
        raise QuantifyError("too few rows with a detectable edge")
    rows = np.asarray(rows, dtype=np.float64)
    locs = np.asarray(locs)
    a, b = np.polyfit(rows, locs, 1)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dist = (xx - (a * yy + b)) / math.sqrt(1.0 + a * a)

    step = 1.0 / oversample
    lo = math.floor(dist.min() / step)
    hi = math.ceil(dist.max() / step)
    n_bins = hi - lo + 1
    idx = np.rint(dist.ravel() / step).astype(np.int64) - lo
    sums = np.bincount(idx, weights=p.ravel(), minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    esf = np.full(n_bins, np.nan)
    filled = counts > 0
    esf[filled] = sums[filled] / counts[filled]
    if not filled.all():
        pos = np.arange(n_bins)
        esf[~filled] = np.interp(pos[~filled], pos[filled], esf[filled])

    lsf = np.zeros(n_bins)
    lsf[1:-1] = (esf[2:] - esf[:-2]) / (2.0 * step)
    total = np.abs(lsf).sum()
    if total <= 0:
        raise QuantifyError("degenerate edge-spread function")
    centroid = float(np.sum(np.arange(n_bins) * np.abs(lsf)) / total)
    half = n_bins / 2.0
    offs = np.arange(n_bins) - centroid
    window = np.where(np.abs(offs) <= half, 0.54 + 0.46 * np.cos(np.pi * offs / half), 0.0)
    lsf_w = lsf * window

    pos_px = (np.arange(n_bins) + lo) * step
    freqs = sfr_frequencies(n_p)
    spectrum = np.abs(np.exp(-2j * np.pi * freqs[:, None] * pos_px[None, :]) @ lsf_w)
    if spectrum[0] <= 0:
        raise QuantifyError("zero DC response")
    sfr = spectrum / spectrum[0]
    # compensate the centered-difference derivative and the bin-average rect
    corr = np.sinc(2.0 * freqs * step) * np.sinc(freqs * step)
    return sfr / corr


def fwhm(kernel) -> float:
    """Full width at half maximum of the kernel's radial profile (px).

    The profile is sampled about the energy centroid by cubic spline
    interpolation and averaged over azimuths; linear interpolation locates
    the half-max crossing. Minimum 1 px.
    """
    k = np.asarray(kernel, dtype=np.float64)
    total = k.sum()
    if total <= 0:
        raise QuantifyError("zero kernel")
    h, w = k.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = float((k * ys).sum() / total)
    cx = float((k * xs).sum() / total)

    r_max = math.hypot(max(cy, h - 1 - cy) + 1, max(cx, w - 1 - cx) + 1)
    radii = np.arange(0.0, r_max + 0.1, 0.1)
    azim = np.linspace(0.0, 2.0 * math.pi, 16, endpoint=False)
    py = cy + radii[:, None] * np.sin(azim)[None, :]
    px = cx + radii[:, None] * np.cos(azim)[None, :]
    samples = map_coordinates(k, [py.ravel(), px.ravel()], order=3, cval=0.0)
    profile = samples.reshape(len(radii), len(azim)).mean(axis=1)

    peak = profile.max()
    if peak <= 0:
        raise QuantifyError("zero kernel profile")
    half_val = peak / 2.0
    below = np.nonzero(profile < half_val)[0]
    start = int(profile.argmax())
    below = below[below > start]
    if len(below) == 0:
        return max(2.0 * float(radii[-1]), 1.0)
    j = below[0]
    r0, r1 = radii[j - 1], radii[j]
    v0, v1 = profile[j - 1], profile[j]
    r_half = r0 + (v0 - half_val) / (v0 - v1) * (r1 - r0)
    return max(2.0 * float(r_half), 1.0)


def oiqe(sfr_target, sfr_ref, cutoff: float = OIQE_CUTOFF) -> float:
    """Mean over frequencies up to half-Nyquist of min(target/ref, 1)."""
    t = np.asarray(sfr_target, dtype=np.float64)
    r = np.asarray(sfr_ref, dtype=np.float64)
    if t.shape != r.shape:
        raise QuantifyError("SFR curves differ in length")
    freqs = sfr_frequencies(len(t))
    mask = freqs <= cutoff + 1e-12
    if np.any(r[mask] <= 1e-9):
        raise QuantifyError("degenerate reference SFR below cutoff")
    return float(np.mean(np.minimum(t[mask] / r[mask], 1.0)))


def oiq(psnr_db: float, ssim_val: float, oiqe_val: float) -> float:
    """Weighted OIQ score: 0.4·PSNR/50 + 0.3·(SSIM−0.5)/0.5 + 0.3·OIQE,
    each term clamped to [0, 1]."""
    clamp = lambda v: min(max(v, 0.0), 1.0)
    return (
        0.4 * clamp(psnr_db / 50.0)
        + 0.3 * clamp((ssim_val - 0.5) / 0.5)
        + 0.3 * clamp(oiqe_val)
    )


def severity_class(avg_oiq: float, thresholds=SEVERITY_THRESHOLDS) -> str:
    if avg_oiq < thresholds[0]:
        return "Strong"
    if avg_oiq < thresholds[1]:
        return "Medium"
    return "Mild"


def spatial_uniformity(oiq_values) -> tuple[float, float]:
    """(CV, U_S) over per-FoV OIQ: population std / mean, U_S = exp(−5·CV)."""
    v = np.asarray(oiq_values, dtype=np.float64)
    if np.any(v <= 0):
        raise QuantifyError("OIQ values must be positive")
    mean = float(v.mean())
    cv = float(v.std(ddof=0)) / mean
    return cv, math.exp(-5.0 * cv)


def _monotone_non_increasing(v, tol: float = MONOTONE_TOL) -> bool:
    diffs = np.diff(np.asarray(v, dtype=np.float64))
    return bool(np.all(diffs < tol))


def od_class(oiq_values, alpha: float = DEFAULT_ALPHA, mono_tol: float = MONOTONE_TOL) -> int:
    """Spatial-variation class of degradation from 5 per-FoV OIQ values.

    0: spatially uniform (U_S >= alpha). Otherwise, with i* the peak FoV
    and j* the worst FoV (lowest index on ties):
    worst at periphery  -> 1 (peak center, monotone), 4 (peak center,
    non-monotone: center also degraded), 5 (peak at interior FoV);
    worst at center -> 2; worst at interior -> 3.
    """
    v = np.asarray(oiq_values, dtype=np.float64)
    if v.shape != (5,):
        raise QuantifyError("od_class expects exactly 5 per-FoV OIQ values")
    _, u_s = spatial_uniformity(v)
    if u_s >= alpha:
        return 0
    i_star = int(np.argmax(v))
    j_star = int(np.argmin(v))
    if j_star == 4:
        if i_star == 0:
            return 1 if _monotone_non_increasing(v, mono_tol) else 4
        return 5
    if j_star == 0:
        return 2
    return 3


def chromatic_class(per_channel_avg_oiq) -> int:
    """Chromatic severity from channel-wise OIQ uniformity; 1 = most severe.

    U_C = exp(−5·CV) over the three channel OIQs, binned into 5 equal-width
    classes."""
    v = np.asarray(per_channel_avg_oiq, dtype=np.float64)
    if v.shape != (3,):
        raise QuantifyError("chromatic_class expects 3 per-channel OIQ values")
    _, u_c = spatial_uniformity(v)
    eps = 1e-12
    return 1 + int(math.floor(min(max(u_c, 0.0), 1.0 - eps) * 5.0))


@dataclass
class OIQReport:
    """Full degradation quantification of one lens."""

    per_fov_oiq: list
    average_oiq: float
    severity: str
    cv: float
    u_s: float
    od_class: int
    chromatic_class: int
    per_channel_avg_oiq: list
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_fov_oiq": list(self.per_fov_oiq),
            "average_oiq": self.average_oiq,
            "severity": self.severity,
            "cv": self.cv,
            "u_s": self.u_s,
            "od_class": self.od_class,
            "chromatic_class": self.chromatic_class,
            "per_channel_avg_oiq": list(self.per_channel_avg_oiq),
            "config": dict(self.config),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "OIQReport":
        return cls(**doc)

    @property
    def subclass_key(self) -> str:
        return f"{self.severity}x{self.od_class}"

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "OIQReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def quantify_lens(
    lens: LensSystem,
    psfs: RGBPSFSet,
    alpha: float = DEFAULT_ALPHA,
    n_p: int = DEFAULT_NP,
    thresholds=SEVERITY_THRESHOLDS,
    mono_tol: float = MONOTONE_TOL,
) -> OIQReport:
    """Checkerboard render -> 5 knife-edge patches -> per-patch metrics ->
    OIQ report with severity, uniformity, OD-Class, and chromatic class."""
    if lens.sensor is None:
        raise QuantifyError("lens has no matched sensor")
    degraded, gt = simulate.render_checkerboard(lens.sensor, psfs)
    patches_d = simulate.knife_edge_patches(degraded)
    patches_g = simulate.knife_edge_patches(gt)

    oiq_matrix = np.zeros((5, 3))
    for i, (pd, pg) in enumerate(zip(patches_d, patches_g)):
        for ch in range(3):
            try:
                p_db, s_val = fidelity_metrics(pd[:, :, ch], pg[:, :, ch])
                sfr_d = sfr_from_edge(pd[:, :, ch], n_p)
                sfr_g = sfr_from_edge(pg[:, :, ch], n_p)
                score = oiq(p_db, s_val, oiqe(sfr_d, sfr_g))
            except QuantifyError as exc:
                raise QuantifyError(f"FoV {i}, channel {ch}: {exc}") from exc
            oiq_matrix[i, ch] = score

    per_fov = oiq_matrix.mean(axis=1)
    per_channel = oiq_matrix.mean(axis=0)
    avg = float(per_fov.mean())
    cv, u_s = spatial_uniformity(per_fov)
    return OIQReport(
        per_fov_oiq=[float(x) for x in per_fov],
        average_oiq=avg,
        severity=severity_class(avg, thresholds),
        cv=cv,
        u_s=u_s,
        od_class=od_class(per_fov, alpha, mono_tol),
        chromatic_class=chromatic_class(per_channel),
        per_channel_avg_oiq=[float(x) for x in per_channel],
        config={
            "alpha": alpha,
            "n_p": n_p,
            "severity_thresholds": list(thresholds),
            "monotone_tol": mono_tol,
        },
    )
