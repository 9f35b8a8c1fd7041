"""Composite reconstruction loss: pixel, Laplacian-gradient, histogram
(color) and perceptual terms.

The color term uses a differentiable soft histogram: each pixel splits its
unit mass linearly between the two nearest of 255 uniformly spaced bin
centers, so counts are piecewise-linear in the pixel values. The
perceptual term compares four feature taps of a frozen convolutional
extractor; a seeded random extractor stands in when no pretrained weights
file is supplied.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import weights_io
from .tensor import (ConvParams, DiffValue, ShapeError, _make_node, add,
                     concat_channels, conv2d, conv_params, mish, mse, scale,
                     subtract)

HISTOGRAM_BINS = 255
NUM_FEATURE_TAPS = 4
FEATURE_STAGE_CHANNELS = (16, 32, 64, 128)


@dataclass
class LossWeights:
    """Multipliers for the gradient, color and perceptual terms."""

    alpha: float = 1.0
    beta: float = 0.001
    gamma: float = 1000.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    """The four loss terms plus their weighted total for one batch."""

    pixel: float
    gradient: float
    color: float
    perceptual: float
    total: float

    @staticmethod
    def fields() -> tuple[str, ...]:
        return ("pixel", "gradient", "color", "perceptual", "total")


def pixel_loss(recon: DiffValue, target: DiffValue) -> DiffValue:
    return mse(recon, target)


def _laplacian_params(channels: int, dtype) -> ConvParams:
    """Fixed 4-neighbor Laplacian stencil applied channelwise (not learnable)."""
    stencil = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=dtype)
    k = np.zeros((channels, channels, 3, 3), dtype=dtype)
    for c in range(channels):
        k[c, c] = stencil
    return ConvParams(DiffValue(k), DiffValue(np.zeros(channels, dtype=dtype)))


def laplacian(image: DiffValue) -> DiffValue:
    """Zero-padded 3x3 Laplacian response, per channel."""
    if image.data.shape[2] < 3 or image.data.shape[3] < 3:
        raise ShapeError(f"laplacian needs at least 3x3 images, got {image.data.shape}")
    return conv2d(image, _laplacian_params(image.data.shape[1], image.data.dtype))


def gradient_loss(recon: DiffValue, target: DiffValue) -> DiffValue:
    """MSE between the Laplacian responses of the two images."""
    if recon.data.shape != target.data.shape:
        raise ShapeError(f"shape mismatch: {recon.data.shape} vs {target.data.shape}")
    return mse(laplacian(recon), laplacian(target))


def soft_histogram(image: DiffValue, bins: int, lo: float, hi: float) -> DiffValue:
    """Differentiable histogram over `bins` centers uniformly spaced on [lo, hi].

    Each pixel contributes (1 - t) to its lower neighbor center and t to
    the upper one, t being its fractional position between them; total
    mass is the pixel count.
    """
    if bins < 2:
        raise ShapeError(f"need at least 2 bins, got {bins}")
    if not hi > lo:
        raise ShapeError(f"histogram range is degenerate: [{lo}, {hi}]")
    width = (hi - lo) / (bins - 1)
    x = image.data.ravel()
    t = (x.astype(np.float64) - lo) / width
    idx = np.clip(np.floor(t).astype(np.int64), 0, bins - 2)
    frac = np.clip(t - idx, 0.0, 1.0)
    hist = np.zeros(bins, dtype=np.float64)
    np.add.at(hist, idx, 1.0 - frac)
    np.add.at(hist, idx + 1, frac)
    out = hist.astype(image.data.dtype)

    def bwd(g: np.ndarray) -> None:
        gx = (g[idx + 1] - g[idx]) / width
        image.accumulate_grad(gx.reshape(image.data.shape).astype(image.data.dtype))

    return _make_node(out, (image,), bwd)


def _norm2(x: DiffValue) -> DiffValue:
    """Euclidean norm as a (1, 1, 1, 1) scalar; subgradient 0 at the origin."""
    sq = np.square(x.data, dtype=np.float64).sum(dtype=np.float64)
    val = np.sqrt(sq)
    out = np.full((1, 1, 1, 1), val, dtype=x.data.dtype)

    def bwd(g: np.ndarray) -> None:
        if val > 0.0:
            x.accumulate_grad((float(g.reshape(())) / val) * x.data)

    return _make_node(out, (x,), bwd)


def color_loss(recon: DiffValue, target: DiffValue) -> DiffValue:
    """Histogram-matching loss: ||hist(recon) - hist(target)||_2 / 255.

    The shared bin range is the min/max over both images, detached from
    the gradient. A degenerate range yields an exact zero.
    """
    if recon.data.shape != target.data.shape:
        raise ShapeError(f"shape mismatch: {recon.data.shape} vs {target.data.shape}")
    lo = float(min(recon.data.min(), target.data.min()))
    hi = float(max(recon.data.max(), target.data.max()))
    if hi - lo < 1e-8:
        return DiffValue(np.zeros((1, 1, 1, 1), dtype=recon.data.dtype))
    h_re = soft_histogram(recon, HISTOGRAM_BINS, lo, hi)
    h_in = soft_histogram(target, HISTOGRAM_BINS, lo, hi)
    return scale(_norm2(subtract(h_re, h_in)), 1.0 / HISTOGRAM_BINS)


class FeatureExtractor:
    """Frozen four-stage convolutional feature stack.

    Each stage is one stride-2 3x3 convolution followed by Mish; the tap
    is the stage output. Grayscale inputs are replicated to three
    channels before the first stage.
    """

    def __init__(self, stages: list[ConvParams]):
        if len(stages) != NUM_FEATURE_TAPS:
            raise ValueError(
                f"extractor needs exactly {NUM_FEATURE_TAPS} stages, got {len(stages)}")
        self.stages = stages

    def features(self, image: DiffValue) -> list[DiffValue]:
        x = concat_channels([image, image, image])
        taps = []
        for stage in self.stages:
            x = mish(conv2d(x, stage))
            taps.append(x)
        return taps


def random_feature_extractor(seed: int = 42) -> FeatureExtractor:
    """Deterministic seeded stand-in for a pretrained extractor."""
    rng = np.random.default_rng([seed, 1])
    stages = []
    c_in = 3
    for c_out in FEATURE_STAGE_CHANNELS:
        stages.append(conv_params(c_in, c_out, stride=2, rng=rng, requires_grad=False))
        c_in = c_out
    return FeatureExtractor(stages)


def save_feature_extractor(extractor: FeatureExtractor, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for i, stage in enumerate(extractor.stages, start=1):
        arrays[f"feat.stage{i}.conv.kernel"] = stage.kernels.data
        arrays[f"feat.stage{i}.conv.bias"] = stage.bias.data
    weights_io.save_arrays(path, arrays)


def load_feature_extractor(path: str | Path) -> FeatureExtractor:
    """Load externally supplied extractor weights (DBFW, feat.stage{1..4}.conv)."""
    arrays = weights_io.load_arrays(path)
    stages = []
    for i in range(1, NUM_FEATURE_TAPS + 1):
        try:
            k = arrays[f"feat.stage{i}.conv.kernel"]
            b = arrays[f"feat.stage{i}.conv.bias"]
        except KeyError as exc:
            raise weights_io.WeightsFormatError(
                f"missing extractor entry {exc.args[0]!r}") from None
        stages.append(ConvParams(DiffValue(k), DiffValue(b), stride=2))
    return FeatureExtractor(stages)


def perceptual_loss(recon: DiffValue, target: DiffValue,
                    extractor: FeatureExtractor) -> DiffValue:
    """Sum of feature-space MSEs over the four taps; grads reach recon only."""
    taps_re = extractor.features(recon)
    taps_in = extractor.features(DiffValue(target.data))
    if len(taps_re) != NUM_FEATURE_TAPS:
        raise ValueError(f"extractor produced {len(taps_re)} taps, "
                         f"expected {NUM_FEATURE_TAPS}")
    total = mse(taps_re[0], taps_in[0])
    for a, b in zip(taps_re[1:], taps_in[1:]):
        total = add(total, mse(a, b))
    return total


def loss_terms(recon: DiffValue, target: DiffValue, weights: LossWeights,
               extractor: FeatureExtractor) -> tuple[dict[str, DiffValue], DiffValue]:
    """All four terms as graph nodes plus the weighted total."""
    terms = {
        "pixel": pixel_loss(recon, target),
        "gradient": gradient_loss(recon, target),
        "color": color_loss(recon, target),
        "perceptual": perceptual_loss(recon, target, extractor),
    }
    total = add(add(terms["pixel"], scale(terms["gradient"], weights.alpha)),
                add(scale(terms["color"], weights.beta),
                    scale(terms["perceptual"], weights.gamma)))
    return terms, total


def total_loss(recon: DiffValue, target: DiffValue, weights: LossWeights,
               extractor: FeatureExtractor) -> LossReport:
    """Evaluate the composite loss and report each term and the total."""
    terms, total = loss_terms(recon, target, weights, extractor)
    return LossReport(pixel=terms["pixel"].item(),
                      gradient=terms["gradient"].item(),
                      color=terms["color"].item(),
                      perceptual=terms["perceptual"].item(),
                      total=total.item())
