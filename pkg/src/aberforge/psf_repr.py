"""PSF maps, the VQ codebook with exact nearest-neighbor quantization, a
k-means codebook fitter, and value oracles for the training losses."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .quantify import fwhm, mtf_from_psf
from .raytrace import RGBPSFSet

DEFAULT_K = 1024
DEFAULT_DIM = 512
DEFAULT_BETA = 0.25

PSFM_MAGIC = b"PSFM"
VQCB_MAGIC = b"VQCB"
PSFM_VERSION = 1
VQCB_VERSION = 1


class PSFReprError(ValueError):
    pass


@dataclass
class PSFMap:
    """Per-pixel PSF feature image: n_p SFR samples plus 3 FWHM values.

    ``features`` has shape (n_fov, N_p); ``fov_assignment`` (H, W) maps
    each pixel to its nearest FoV, so the dense map is
    features[fov_assignment] with channel-last layout.
    """

    height: int
    width: int
    n_p: int
    features: np.ndarray  # (n_fov, n_p + 3)
    fov_assignment: np.ndarray  # (H, W) uint16

    @property
    def feature_length(self) -> int:
        return self.n_p + 3

    def dense(self) -> np.ndarray:
        """(H, W, N_p) per-pixel feature image."""
        return self.features[self.fov_assignment]


def build_psf_map(psfs: RGBPSFSet, height: int, width: int, n_p: int = 32) -> PSFMap:
    """Assign every pixel the feature vector of its radially nearest FoV:
    green-channel SFR samples followed by per-channel FWHM (R, G, B)."""
    if psfs.n_fov == 0:
        raise PSFReprError("empty PSF set")
    if n_p < 4:
        raise PSFReprError("n_p must be at least 4")
    feats = np.zeros((psfs.n_fov, n_p + 3))
    for f in range(psfs.n_fov):
        r_k, g_k, b_k = psfs.kernels[f]
        feats[f, :n_p] = mtf_from_psf(g_k, n_p)
        feats[f, n_p] = fwhm(r_k)
        feats[f, n_p + 1] = fwhm(g_k)
        feats[f, n_p + 2] = fwhm(b_k)

    radii_px = psfs.image_heights_mm / (psfs.pitch_um * 1e-3)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    pix_r = np.hypot(yy - cy, xx - cx)
    assign = np.argmin(np.abs(pix_r[:, :, None] - radii_px[None, None, :]), axis=2)
    return PSFMap(height, width, n_p, feats, assign.astype(np.uint16))


@dataclass
class Codebook:
    """K code vectors of dimension d plus usage counters."""

    codes: np.ndarray  # (K, d)
    usage: np.ndarray = field(default=None)  # (K,) uint64

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.codes.ndim != 2 or len(self.codes) < 1:
            raise PSFReprError("codebook needs at least one code vector")
        if not np.isfinite(self.codes).all():
            raise PSFReprError("codebook contains non-finite values")
        if self.usage is None:
            self.usage = np.zeros(len(self.codes), dtype=np.uint64)
        else:
            self.usage = np.asarray(self.usage, dtype=np.uint64)

    @property
    def k(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


def quantize(features, codebook: Codebook, update_usage: bool = True):
    """Nearest-neighbor quantization: per feature vector, the index of the
    L2-nearest code (ties to lowest index) and the code itself."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != codebook.dim:
        raise PSFReprError(
            f"feature dimension {x.shape[1]} != codebook dimension {codebook.dim}"
        )
    codes = codebook.codes
    # ||x - z||² = ||x||² − 2 x·z + ||z||²; argmin resolves ties to lowest index
    d2 = (
        (x**2).sum(axis=1, keepdims=True)
        - 2.0 * x @ codes.T
        + (codes**2).sum(axis=1)[None, :]
    )
    idx = np.argmin(d2, axis=1)
    if update_usage:
        np.add.at(codebook.usage, idx, 1)
    return idx, codes[idx]


def fit_codebook(samples, k: int, iterations: int = 20, seed: int = 0) -> Codebook:
    """Lloyd's k-means with seeded k-means++ initialization; empty clusters
    are reseeded to the farthest sample."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.size == 0:
        raise PSFReprError("empty sample set")
    n = len(x)
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[int(rng.integers(n))]
        else:
            centers[j] = x[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    for _ in range(iterations):
        dist = (
            (x**2).sum(axis=1, keepdims=True)
            - 2.0 * x @ centers.T
            + (centers**2).sum(axis=1)[None, :]
        )
        assign = np.argmin(dist, axis=1)
        mind = dist[np.arange(n), assign]
        for j in range(k):
            mask = assign == j
            if mask.any():
                centers[j] = x[mask].mean(axis=0)
            else:
                centers[j] = x[int(np.argmax(mind))]
                mind[int(np.argmax(mind))] = 0.0
    return Codebook(centers)


def kmeans_objective(samples, codebook: Codebook) -> float:
    """Mean squared distance of samples to their nearest codes."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    _, q = quantize(x, codebook, update_usage=False)
    return float(((x - q) ** 2).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Loss value oracles. stop-gradient is an identity on values; the terms are
# split exactly as in the training objective they mirror.

def vq_losses(pre_q, quantized, recon, target, beta: float = DEFAULT_BETA):
    """(recon_l1, codebook_term, commit_term, total) for the VQ objective:
    L1 map reconstruction plus codebook and β-weighted commitment terms."""
    zh = np.asarray(pre_q, dtype=np.float64)
    zq = np.asarray(quantized, dtype=np.float64)
    if zh.shape != zq.shape:
        raise PSFReprError("pre-quantization / quantized shape mismatch")
    r = np.asarray(recon, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if r.shape != t.shape:
        raise PSFReprError("reconstruction / target shape mismatch")
    recon_l1 = float(np.abs(r - t).mean())
    zh2 = zh.reshape(-1, zh.shape[-1]) if zh.ndim > 1 else zh.reshape(1, -1)
    zq2 = zq.reshape(zh2.shape)
    codebook_term = float(((zh2 - zq2) ** 2).sum(axis=1).mean())
    commit_term = beta * float(((zq2 - zh2) ** 2).sum(axis=1).mean())
    total = recon_l1 + codebook_term + commit_term
    return recon_l1, codebook_term, commit_term, total


def degradation_losses(pred_od, gt_od, l_vq: float, l_fm: float):
    """(l_odn, l_lpr, l_pfp): L1 degradation loss, the joint VQ+ODN
    objective, and the feature-prediction objective."""
    a = np.asarray(pred_od, dtype=np.float64)
    b = np.asarray(gt_od, dtype=np.float64)
    if a.shape != b.shape:
        raise PSFReprError("image shape mismatch")
    if l_vq < 0 or l_fm < 0:
        raise PSFReprError("loss terms must be nonnegative")
    l_odn = float(np.abs(a - b).mean())
    return l_odn, l_vq + l_odn, l_fm + l_odn


def feature_matching_loss(pred_features, gt_quantized) -> float:
    """Mean squared L2 distance between predicted features and ground-truth
    quantized codes."""
    a = np.asarray(pred_features, dtype=np.float64)
    b = np.asarray(gt_quantized, dtype=np.float64)
    if a.shape != b.shape:
        raise PSFReprError("feature shape mismatch")
    a2 = a.reshape(-1, a.shape[-1]) if a.ndim > 1 else a.reshape(1, -1)
    b2 = b.reshape(a2.shape)
    return float(((a2 - b2) ** 2).sum(axis=1).mean())


@dataclass
class DimensionAdapter:
    """Plain linear map bridging feature-dimension mismatches at codebook
    boundaries; identity by default."""

    weight: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "DimensionAdapter":
        return cls(np.eye(dim))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.weight.shape[0]:
            raise PSFReprError(
                f"adapter expects dim {self.weight.shape[0]}, got {x.shape[-1]}"
            )
        return x @ self.weight


# ---------------------------------------------------------------------------
# Binary containers

def save_codebook(codebook: Codebook, path) -> None:
    with open(path, "wb") as f:
        f.write(VQCB_MAGIC)
        f.write(struct.pack("<H", VQCB_VERSION))
        f.write(struct.pack("<II", codebook.k, codebook.dim))
        f.write(np.asarray(codebook.codes, "<f4").tobytes())
        f.write(np.asarray(codebook.usage, "<u8").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        if f.read(4) != VQCB_MAGIC:
            raise PSFReprError("bad codebook magic")
        (version,) = struct.unpack("<H", f.read(2))
        if version != VQCB_VERSION:
            raise PSFReprError(f"unsupported codebook version {version}")
        k, d = struct.unpack("<II", f.read(8))
        codes = np.frombuffer(f.read(4 * k * d), "<f4").reshape(k, d).astype(np.float64)
        usage = np.frombuffer(f.read(8 * k), "<u8").copy()
    return Codebook(codes, usage)


def save_psf_map(pmap: PSFMap, path) -> None:
    with open(path, "wb") as f:
        f.write(PSFM_MAGIC)
        f.write(struct.pack("<H", PSFM_VERSION))
        f.write(struct.pack("<III", pmap.height, pmap.width, pmap.feature_length))
        f.write(struct.pack("<I", len(pmap.features)))
        f.write(np.asarray(pmap.features, "<f4").tobytes())
        f.write(np.asarray(pmap.fov_assignment, "<u2").tobytes())


def load_psf_map(path) -> PSFMap:
    with open(path, "rb") as f:
        if f.read(4) != PSFM_MAGIC:
            raise PSFReprError("bad PSF map magic")
        (version,) = struct.unpack("<H", f.read(2))
        if version != PSFM_VERSION:
            raise PSFReprError(f"unsupported PSF map version {version}")
        h, w, n_feat = struct.unpack("<III", f.read(12))
        (n_fov,) = struct.unpack("<I", f.read(4))
        feats = np.frombuffer(f.read(4 * n_fov * n_feat), "<f4").reshape(n_fov, n_feat)
        assign = np.frombuffer(f.read(2 * h * w), "<u2").reshape(h, w)
    return PSFMap(h, w, n_feat - 3, feats.astype(np.float64), assign.copy())
