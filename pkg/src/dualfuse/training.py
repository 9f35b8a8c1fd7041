"""Optimization loop: bias-corrected Adam, reduce-on-plateau learning
rate, per-epoch logging and checkpointing.

The whole run is a pure function of (tiles, config): weight init, the
perceptual extractor and each epoch's shuffle draw from streams derived
from the config seed, so two runs with the same inputs produce
byte-identical weights files.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import weights_io
from .data import CropSet, make_batches
from .losses import (FeatureExtractor, LossReport, LossWeights, load_feature_extractor,
                     loss_terms, random_feature_extractor)
from .model import ModelWeights, forward_reconstruct, init_weights
from .tensor import DiffValue, backward

MIN_LR = 1e-10
PLATEAU_PATIENCE = 10
PLATEAU_FACTOR = 0.5
IMPROVEMENT_THRESHOLD = 1e-8

# seed-stream tags: model init uses [seed, 0], the random extractor [seed, 1],
# epoch shuffles [seed, 3, epoch]
_SHUFFLE_TAG = 3


class TrainingError(RuntimeError):
    """Raised when optimization cannot continue (non-finite loss/gradient)."""


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus the shared step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, DiffValue]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, DiffValue], state: OptimizerState,
              hyper: AdamHyper) -> None:
    """One bias-corrected Adam update, reading each parameter's .grad."""
    state.step += 1
    t = state.step
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * np.square(g)
        p.data -= (hyper.lr / c1) * m / (np.sqrt(v / c2) + hyper.eps)


@dataclass
class SchedulerState:
    """Reduce-on-plateau bookkeeping."""

    current_lr: float
    best_loss: float = math.inf
    epochs_since_improvement: int = 0


def scheduler_step(state: SchedulerState, epoch_loss: float) -> SchedulerState:
    """Halve the learning rate after PLATEAU_PATIENCE stagnant epochs."""
    if epoch_loss < state.best_loss - IMPROVEMENT_THRESHOLD:
        state.best_loss = epoch_loss
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= PLATEAU_PATIENCE:
            state.current_lr = max(state.current_lr * PLATEAU_FACTOR, MIN_LR)
            state.epochs_since_improvement = 0
    return state


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 64
    lr: float = 1e-3
    alpha: float = 1.0
    beta: float = 0.001
    gamma: float = 1000.0
    seed: int = 0
    data_dir: str = ""
    checkpoint_dir: str = ""
    perceptual_weights: str | None = None

    @classmethod
    def desk_preset(cls, **overrides) -> "TrainConfig":
        """Small CPU-friendly preset (full-scale default is hours-long)."""
        return cls(**{"epochs": 5, "batch": 8, **overrides})

    @classmethod
    def from_json_file(cls, path: str | Path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma)


LOG_COLUMNS = ("epoch", "pixel", "gradient", "color", "perceptual", "total", "lr")


def _checkpoint_paths(directory: Path, tag: str) -> tuple[Path, Path, Path]:
    return (directory / f"{tag}.weights.dbfw",
            directory / f"{tag}.optim.dbfw",
            directory / f"{tag}.state.json")


def save_checkpoint(directory: str | Path, tag: str, weights: ModelWeights,
                    opt: OptimizerState, sched: SchedulerState,
                    epochs_done: int) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    w_path, o_path, s_path = _checkpoint_paths(directory, tag)
    weights.save(w_path)
    moments: dict[str, np.ndarray] = {}
    for name in opt.m:
        moments[f"adam.m.{name}"] = opt.m[name]
        moments[f"adam.v.{name}"] = opt.v[name]
    weights_io.save_arrays(o_path, moments)
    s_path.write_text(json.dumps({
        "epochs_done": epochs_done,
        "adam_step": opt.step,
        "current_lr": sched.current_lr,
        "best_loss": sched.best_loss,
        "epochs_since_improvement": sched.epochs_since_improvement,
    }, sort_keys=True))


def load_checkpoint(directory: str | Path, tag: str = "last",
                    ) -> tuple[ModelWeights, OptimizerState, SchedulerState, int]:
    w_path, o_path, s_path = _checkpoint_paths(Path(directory), tag)
    weights = ModelWeights.load(w_path, requires_grad=True)
    moments = weights_io.load_arrays(o_path)
    opt = OptimizerState()
    for name in weights.parameters():
        opt.m[name] = moments[f"adam.m.{name}"].copy()
        opt.v[name] = moments[f"adam.v.{name}"].copy()
    meta = json.loads(s_path.read_text())
    opt.step = meta["adam_step"]
    sched = SchedulerState(current_lr=meta["current_lr"],
                           best_loss=meta["best_loss"],
                           epochs_since_improvement=meta["epochs_since_improvement"])
    return weights, opt, sched, meta["epochs_done"]


def _mean_report(sums: dict[str, float], count: int) -> LossReport:
    return LossReport(**{k: sums[k] / count for k in LossReport.fields()})


def train(crops: CropSet, config: TrainConfig,
          extractor: FeatureExtractor | None = None,
          resume_from: str | Path | None = None,
          log_fn=None) -> tuple[ModelWeights, list[LossReport]]:
    """Train the autoencoder on a pooled tile set.

    Returns the final weights and one mean LossReport per epoch. If
    config.checkpoint_dir is set, writes 'last' checkpoints every epoch,
    'best' checkpoints on improvement, and appends to log.csv.
    """
    if not crops.tiles and config.epochs > 0:
        raise TrainingError("empty dataset")
    if extractor is None:
        if config.perceptual_weights:
            extractor = load_feature_extractor(config.perceptual_weights)
        else:
            extractor = random_feature_extractor(config.seed)
    lw = config.loss_weights()

    if resume_from is not None:
        weights, opt, sched, start_epoch = load_checkpoint(resume_from)
    else:
        weights, start_epoch = init_weights(config.seed), 0
        opt = OptimizerState.for_params(weights.parameters())
        sched = SchedulerState(current_lr=config.lr)

    params = weights.parameters()
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    log_path = None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        log_path = ckpt_dir / "log.csv"
        if resume_from is None or not log_path.exists():
            with open(log_path, "w", newline="") as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    history: list[LossReport] = []
    for epoch in range(start_epoch, config.epochs):
        batches = make_batches(crops, config.batch,
                               seed=[config.seed, _SHUFFLE_TAG, epoch])
        sums = {k: 0.0 for k in LossReport.fields()}
        n_samples = 0
        hyper = AdamHyper(lr=sched.current_lr)
        for batch in batches:
            recon = forward_reconstruct(DiffValue(batch), weights)
            terms, total = loss_terms(recon, DiffValue(batch), lw, extractor)
            total_val = total.item()
            if not math.isfinite(total_val):
                raise TrainingError(
                    f"non-finite loss {total_val} at epoch {epoch}; "
                    "last checkpoint kept")
            backward(total)
            adam_step(params, opt, hyper)
            weights.zero_grad()
            b = batch.shape[0]
            n_samples += b
            for k in ("pixel", "gradient", "color", "perceptual"):
                sums[k] += terms[k].item() * b
            sums["total"] += total_val * b
        report = _mean_report(sums, n_samples)
        history.append(report)
        lr_this_epoch = sched.current_lr
        improved = report.total < sched.best_loss - IMPROVEMENT_THRESHOLD
        scheduler_step(sched, report.total)
        if log_fn is not None:
            log_fn(epoch, report, lr_this_epoch)
        if log_path is not None:
            with open(log_path, "a", newline="") as f:
                csv.writer(f).writerow(
                    (epoch, report.pixel, report.gradient, report.color,
                     report.perceptual, report.total, lr_this_epoch))
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir, "last", weights, opt, sched, epoch + 1)
            if improved:
                save_checkpoint(ckpt_dir, "best", weights, opt, sched, epoch + 1)
    return weights, history
