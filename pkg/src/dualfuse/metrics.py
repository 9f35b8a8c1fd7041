"""Objective fusion-quality indices: edge intensity (EI), spatial
frequency (SF), entropy (EN), structural similarity (SSIM), fusion
artifact ratio (Nabf) and mutual information (MI).

All indices operate on the 0-255 scale: [0, 1] inputs are multiplied by
255 without rounding, except entropy/MI which quantize to integer bins
(floor after x255, clamped). Every constant lives in MetricConfig so
alternates can be tested.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve as ndi_convolve
from scipy.signal import convolve2d

from .tensor import ShapeError, Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass
class MetricConfig:
    gray_levels: int = 256
    quantize_guard: float = 1e-4  # absorbs float32 storage error at bin edges
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    sobel_border: str = "reflect"
    # perceptual-preservation sigmoids of the Q^{AB/F} framework
    nabf_gamma_g: float = 0.9994
    nabf_kappa_g: float = -15.0
    nabf_sigma_g: float = 0.5
    nabf_gamma_a: float = 0.9879
    nabf_kappa_a: float = -22.0
    nabf_sigma_a: float = 0.8


DEFAULT_CONFIG = MetricConfig()


@dataclass
class MetricReport:
    """Six quality indices for one (fused, ir, visible) triple."""

    ei: float
    sf: float
    en: float
    ssim: float
    ssim_ir: float
    ssim_vi: float
    nabf: float
    mi: float
    mi_ir: float
    mi_vi: float

    COLUMNS = ("ei", "sf", "en", "ssim", "ssim_ir", "ssim_vi",
               "nabf", "mi", "mi_ir", "mi_vi")

    def to_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.COLUMNS}


def _as_image(image: Tensor) -> np.ndarray:
    """Accept (h, w) or (1, 1, h, w); return float64 (h, w) on the 0-255 scale."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1 or arr.shape[1] != 1:
            raise ShapeError(f"metrics need a single grayscale image, got {arr.shape}")
        arr = arr[0, 0]
    if arr.ndim != 2:
        raise ShapeError(f"metrics need a 2-D image, got shape {arr.shape}")
    return arr * 255.0


def _quantize(scaled: np.ndarray, cfg: MetricConfig) -> np.ndarray:
    q = np.floor(scaled + cfg.quantize_guard).astype(np.int64)
    return np.clip(q, 0, cfg.gray_levels - 1)


def entropy(image: Tensor, cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    """Shannon entropy in bits over the 8-bit quantized histogram."""
    q = _quantize(_as_image(image), cfg)
    counts = np.bincount(q.ravel(), minlength=cfg.gray_levels)
    p = counts[counts > 0] / q.size
    return float(-(p * np.log2(p)).sum())


def spatial_frequency(image: Tensor) -> float:
    """sqrt(RF^2 + CF^2) from horizontal/vertical neighbor differences."""
    img = _as_image(image)
    h, w = img.shape
    if h < 2 or w < 2:
        raise ShapeError(f"spatial_frequency needs at least 2x2, got {h}x{w}")
    rf2 = np.square(np.diff(img, axis=1)).mean()
    cf2 = np.square(np.diff(img, axis=0)).mean()
    return float(math.sqrt(rf2 + cf2))


def _sobel(img: np.ndarray, cfg: MetricConfig) -> tuple[np.ndarray, np.ndarray]:
    sx = ndi_convolve(img, SOBEL_X, mode=cfg.sobel_border)
    sy = ndi_convolve(img, SOBEL_Y, mode=cfg.sobel_border)
    return sx, sy


def edge_intensity(image: Tensor, cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    """Mean Sobel gradient magnitude."""
    img = _as_image(image)
    if min(img.shape) < 3:
        raise ShapeError(f"edge_intensity needs at least 3x3, got {img.shape}")
    sx, sy = _sobel(img, cfg)
    return float(np.sqrt(sx * sx + sy * sy).mean())


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-np.square(np.arange(size) - half) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def ssim_index(a: Tensor, b: Tensor, cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    """Mean local SSIM with a Gaussian window over the valid region."""
    x = _as_image(a)
    y = _as_image(b)
    if x.shape != y.shape:
        raise ShapeError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if min(x.shape) < cfg.ssim_window:
        raise ShapeError(f"ssim needs images of at least "
                         f"{cfg.ssim_window}x{cfg.ssim_window}, got {x.shape}")
    win = _gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    c1 = (cfg.ssim_k1 * 255.0) ** 2
    c2 = (cfg.ssim_k2 * 255.0) ** 2

    def filt(img):
        return convolve2d(img, win, mode="valid")

    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def _mi_pair(a: np.ndarray, b: np.ndarray, cfg: MetricConfig) -> float:
    """Mutual information in bits from the 256x256 joint histogram."""
    levels = cfg.gray_levels
    joint = np.bincount(a.ravel() * levels + b.ravel(),
                        minlength=levels * levels).reshape(levels, levels)
    pxy = joint / a.size
    px = pxy.sum(axis=1)
    py = pxy.sum(axis=0)
    nz = pxy > 0
    outer = np.outer(px, py)
    return float((pxy[nz] * np.log2(pxy[nz] / outer[nz])).sum())


def mutual_information(fused: Tensor, ir: Tensor, vis: Tensor,
                       cfg: MetricConfig = DEFAULT_CONFIG,
                       ) -> tuple[float, float, float]:
    """(MI(fused, ir) + MI(fused, vis), MI(fused, ir), MI(fused, vis))."""
    f = _quantize(_as_image(fused), cfg)
    a = _quantize(_as_image(ir), cfg)
    b = _quantize(_as_image(vis), cfg)
    if f.shape != a.shape or f.shape != b.shape:
        raise ShapeError(f"shape mismatch: {f.shape} vs {a.shape} vs {b.shape}")
    mi_ir = _mi_pair(f, a, cfg)
    mi_vi = _mi_pair(f, b, cfg)
    return mi_ir + mi_vi, mi_ir, mi_vi


def _edge_maps(img: np.ndarray, cfg: MetricConfig) -> tuple[np.ndarray, np.ndarray]:
    """Sobel strength and orientation (arctan(sy/sx), pi/2 where sx == 0)."""
    sx, sy = _sobel(img, cfg)
    g = np.sqrt(sx * sx + sy * sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(sx == 0.0, math.pi / 2.0, np.arctan(sy / np.where(sx == 0.0, 1.0, sx)))
    return g, alpha


def _edge_preservation(g_src: np.ndarray, a_src: np.ndarray, g_f: np.ndarray,
                       a_f: np.ndarray, cfg: MetricConfig) -> np.ndarray:
    """Per-pixel Q = Qg * Qa sigmoids of relative strength and orientation."""
    big = np.maximum(g_src, g_f)
    small = np.minimum(g_src, g_f)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(big > 0.0, small / np.where(big > 0.0, big, 1.0), 0.0)
    ang = 1.0 - np.abs(a_src - a_f) / (math.pi / 2.0)
    qg = cfg.nabf_gamma_g / (1.0 + np.exp(cfg.nabf_kappa_g * (rel - cfg.nabf_sigma_g)))
    qa = cfg.nabf_gamma_a / (1.0 + np.exp(cfg.nabf_kappa_a * (ang - cfg.nabf_sigma_a)))
    return qg * qa


def nabf(fused: Tensor, ir: Tensor, vis: Tensor,
         cfg: MetricConfig = DEFAULT_CONFIG) -> float:
    """Fusion-artifact ratio: edge-strength-weighted mass of pixels whose
    fused edge strength exceeds both sources, normalized by total source
    edge strength."""
    f = _as_image(fused)
    a = _as_image(ir)
    b = _as_image(vis)
    if f.shape != a.shape or f.shape != b.shape:
        raise ShapeError(f"shape mismatch: {f.shape} vs {a.shape} vs {b.shape}")
    g_f, al_f = _edge_maps(f, cfg)
    g_a, al_a = _edge_maps(a, cfg)
    g_b, al_b = _edge_maps(b, cfg)
    q_af = _edge_preservation(g_a, al_a, g_f, al_f, cfg)
    q_bf = _edge_preservation(g_b, al_b, g_f, al_f, cfg)
    artifacts = (g_f > g_a) & (g_f > g_b)
    denom = (g_a + g_b).sum()
    if denom == 0.0:
        return 0.0
    num = (artifacts * (g_a * (1.0 - q_af) + g_b * (1.0 - q_bf))).sum()
    return float(num / denom)


def evaluate_all(fused: Tensor, ir: Tensor, vis: Tensor,
                 cfg: MetricConfig = DEFAULT_CONFIG) -> MetricReport:
    """All six indices plus the per-source SSIM and MI breakdowns."""
    f = np.asarray(fused)
    if _as_image(f).shape != _as_image(ir).shape or \
            _as_image(f).shape != _as_image(vis).shape:
        raise ShapeError("evaluate_all needs a same-shape registered triple")
    s_ir = ssim_index(fused, ir, cfg)
    s_vi = ssim_index(fused, vis, cfg)
    mi_total, mi_ir, mi_vi = mutual_information(fused, ir, vis, cfg)
    return MetricReport(
        ei=edge_intensity(fused, cfg),
        sf=spatial_frequency(fused),
        en=entropy(fused, cfg),
        ssim=(s_ir + s_vi) / 2.0,
        ssim_ir=s_ir,
        ssim_vi=s_vi,
        nabf=nabf(fused, ir, vis, cfg),
        mi=mi_total,
        mi_ir=mi_ir,
        mi_vi=mi_vi,
    )
