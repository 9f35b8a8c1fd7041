"""Dual-branch autoencoder: densely connected detail branch, rapidly
downsampling semantic branch, and a four-layer decoder.

All feature maps keep the input spatial size except inside the semantic
branch, which halves it three times and bilinearly upsamples x8 back, so
encoder inputs must have height and width divisible by 8. The final
decoder convolution is linear; outputs are clamped to [0, 1] only when
exported as images.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fusion, weights_io
from .tensor import (ConvParams, DiffValue, ShapeError, Tensor, bilinear_upsample,
                     concat_channels, conv2d, conv_params, mish, no_grad)

# (name, c_in, c_out, stride) for every learnable convolution
LAYER_SPECS: tuple[tuple[str, int, int, int], ...] = (
    ("enc.conv1", 1, 32, 1),
    ("detail.d1", 32, 16, 1),
    ("detail.d2", 16, 16, 1),
    ("detail.d3", 32, 16, 1),
    ("detail.d4", 48, 16, 1),
    ("semantic.s1", 32, 64, 2),
    ("semantic.s2", 64, 128, 2),
    ("semantic.s3", 128, 64, 2),
    ("dec.conv1", 128, 64, 1),
    ("dec.conv2", 64, 32, 1),
    ("dec.conv3", 32, 16, 1),
    ("dec.conv4", 16, 1, 1),
)

UPSAMPLE_FACTOR = 8
LATENT_CHANNELS = 128

FUSION_STRATEGIES = ("addition", "channel")


@dataclass
class ModelWeights:
    """Named ConvParams for every layer, in LAYER_SPECS order."""

    layers: dict[str, ConvParams]

    def __getitem__(self, name: str) -> ConvParams:
        return self.layers[name]

    def parameters(self) -> dict[str, DiffValue]:
        """Flat name -> leaf mapping ('layer.kernel' / 'layer.bias')."""
        out: dict[str, DiffValue] = {}
        for name, p in self.layers.items():
            out[f"{name}.kernel"] = p.kernels
            out[f"{name}.bias"] = p.bias
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {name: leaf.data for name, leaf in self.parameters().items()}

    def save(self, path: str | Path) -> None:
        weights_io.save_arrays(path, self.to_arrays())

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray],
                    requires_grad: bool = False) -> "ModelWeights":
        layers: dict[str, ConvParams] = {}
        for name, c_in, c_out, stride in LAYER_SPECS:
            try:
                k = arrays[f"{name}.kernel"]
                b = arrays[f"{name}.bias"]
            except KeyError as exc:
                raise weights_io.WeightsFormatError(
                    f"missing entry {exc.args[0]!r} for layer {name}") from None
            if k.shape != (c_out, c_in, 3, 3):
                raise weights_io.WeightsFormatError(
                    f"{name}.kernel has shape {k.shape}, expected {(c_out, c_in, 3, 3)}")
            layers[name] = ConvParams(DiffValue(k, requires_grad),
                                      DiffValue(b, requires_grad), stride=stride)
        return cls(layers)

    @classmethod
    def load(cls, path: str | Path, requires_grad: bool = False) -> "ModelWeights":
        return cls.from_arrays(weights_io.load_arrays(path), requires_grad)


def init_weights(seed: int = 0, requires_grad: bool = True) -> ModelWeights:
    """Seeded Kaiming-uniform kernels and zero biases for every layer."""
    rng = np.random.default_rng([seed, 0])
    layers = {name: conv_params(c_in, c_out, stride, rng, requires_grad)
              for name, c_in, c_out, stride in LAYER_SPECS}
    return ModelWeights(layers)


def _as_diff(image: Tensor | DiffValue) -> DiffValue:
    return image if isinstance(image, DiffValue) else DiffValue(image)


def _check_encode_input(shape: tuple[int, ...]) -> None:
    if len(shape) != 4 or shape[1] != 1:
        raise ShapeError(f"encoder expects (n, 1, H, W), got {shape}")
    n, _, h, w = shape
    if h % 8 or w % 8:
        raise ShapeError(
            f"encoder input size {h}x{w} must be divisible by 8 "
            "(three stride-2 layers followed by x8 upsampling)")


def encode(image: Tensor | DiffValue, weights: ModelWeights) -> DiffValue:
    """Run both encoder branches; returns the 128-channel latent features.

    Channels 0-63 are the dense detail concat, 64-127 the upsampled
    semantic branch.
    """
    x = _as_diff(image)
    _check_encode_input(x.data.shape)
    w = weights.layers
    x0 = mish(conv2d(x, w["enc.conv1"]))

    x1 = mish(conv2d(x0, w["detail.d1"]))
    x2 = mish(conv2d(x1, w["detail.d2"]))
    x3 = mish(conv2d(concat_channels([x1, x2]), w["detail.d3"]))
    x4 = mish(conv2d(concat_channels([x1, x2, x3]), w["detail.d4"]))
    detail = concat_channels([x1, x2, x3, x4])

    s = mish(conv2d(x0, w["semantic.s1"]))
    s = mish(conv2d(s, w["semantic.s2"]))
    s = mish(conv2d(s, w["semantic.s3"]))
    semantic = bilinear_upsample(s, UPSAMPLE_FACTOR)

    return concat_channels([detail, semantic])


def decode(latent: Tensor | DiffValue, weights: ModelWeights) -> DiffValue:
    """Reduce 128 latent channels to a single-channel image (linear output)."""
    z = _as_diff(latent)
    if z.data.ndim != 4 or z.data.shape[1] != LATENT_CHANNELS:
        raise ShapeError(
            f"decoder expects (n, {LATENT_CHANNELS}, H, W), got {z.data.shape}")
    w = weights.layers
    z = mish(conv2d(z, w["dec.conv1"]))
    z = mish(conv2d(z, w["dec.conv2"]))
    z = mish(conv2d(z, w["dec.conv3"]))
    return conv2d(z, w["dec.conv4"])


def forward_reconstruct(image: Tensor | DiffValue, weights: ModelWeights) -> DiffValue:
    """decode(encode(image)), differentiable end to end."""
    return decode(encode(image, weights), weights)


def fuse_images(ir: Tensor, vis: Tensor, weights: ModelWeights,
                strategy: str = "channel") -> Tensor:
    """Siamese encode both inputs, fuse the latents, decode the result."""
    ir = np.asarray(ir, dtype=np.float32)
    vis = np.asarray(vis, dtype=np.float32)
    if ir.shape != vis.shape:
        raise ShapeError(f"input shape mismatch: ir {ir.shape} vs vis {vis.shape}")
    if strategy not in FUSION_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}, expected one of "
                         f"{FUSION_STRATEGIES}")
    with no_grad():
        f_ir = encode(ir, weights).data
        f_vi = encode(vis, weights).data
        if strategy == "addition":
            fused = fusion.fuse_addition(f_ir, f_vi)
        else:
            fused = fusion.fuse_channel(f_ir, f_vi)
        return decode(fused, weights).data
