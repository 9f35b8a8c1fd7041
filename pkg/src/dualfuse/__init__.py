"""dualfuse: dual-branch autoencoder for infrared/visible image fusion.

Subpackages cover the differentiable tensor core, the encoder/decoder
model, the composite training loss, the two fusion strategies, dataset
preparation, the training loop and the six objective quality metrics.
"""

from .tensor import DiffValue, Tensor, backward, no_grad
from .model import ModelWeights, encode, decode, forward_reconstruct, fuse_images
from .losses import LossReport, LossWeights, total_loss
from .metrics import MetricReport, evaluate_all
from .training import TrainConfig, train

__all__ = [
    "DiffValue", "Tensor", "backward", "no_grad",
    "ModelWeights", "encode", "decode", "forward_reconstruct", "fuse_images",
    "LossReport", "LossWeights", "total_loss",
    "MetricReport", "evaluate_all",
    "TrainConfig", "train",
]

__version__ = "0.1.0"
