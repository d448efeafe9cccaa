"""Optimizer, learning-rate schedule, and the epoch loop.

Training is fully deterministic given the config seed: the train/val
split, per-epoch shuffles, and parameter init all derive named RNG
streams from it, so identical configs reproduce bit-identical
checkpoints.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array, Tape, smul
from .evaluation import EvalReport, evaluate_samples
from .losses import LossError, LossInput, default_loss_for, loss_plain, loss_pncnn
from .networks import Pipeline, pipeline_forward
from .seeding import derive_rng
from .synth import Sample


class TrainingError(Exception):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    decay_every: int = 3
    decay_factor: float = 0.1
    epochs: int = 30
    batch: int = 4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    loss: str = "auto"
    val_frac: float = 0.1
    grad_clip: float | None = None

    def __post_init__(self):
        if self.lr0 <= 0.0:
            raise TrainingError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 < self.decay_factor <= 1.0):
            raise TrainingError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.epochs < 1:
            raise TrainingError(f"epochs must be >= 1, got {self.epochs}")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: lr0 * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise TrainingError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class AdamState:
    m: dict[str, Array] = field(default_factory=dict)
    v: dict[str, Array] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Array], grads: dict[str, Array],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class TrainResult:
    val_losses: list[float]
    reports: list[EvalReport]
    best_epoch: int
    train_seconds: float


def compute_loss(pipeline: Pipeline, sample: Sample, loss_spec: str,
                 tape: Tape | None = None, leaves=None):
    out = pipeline_forward(pipeline, sample.sparse, tape, leaves=leaves)
    inp = LossInput(prediction=out.prediction, s=out.s, gt=sample.gt,
                    valid=sample.gt > 0.0)
    if loss_spec in ("l1", "l2"):
        return loss_plain(inp, loss_spec)
    return loss_pncnn(inp, loss_spec, s_min=pipeline.cfg.s_min)


def _validation_loss(pipeline: Pipeline, samples: list[Sample], loss_spec: str) -> float:
    total = 0.0
    for sample in samples:
        total += compute_loss(pipeline, sample, loss_spec).item()
    return total / max(len(samples), 1)


def split_train_val(n: int, val_frac: float, seed: int):
    order = derive_rng(seed, "split").permutation(n)
    n_val = int(round(n * val_frac))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def train(pipeline: Pipeline, samples: list[Sample], cfg: TrainConfig,
          log=None) -> TrainResult:
    """Train in place; evaluates the held-out split after every epoch."""
    loss_spec = cfg.loss if cfg.loss != "auto" else default_loss_for(pipeline.cfg.variant)
    if not samples:
        raise TrainingError("empty dataset")
    train_idx, val_idx = split_train_val(len(samples), cfg.val_frac, cfg.seed)
    if not train_idx:
        raise TrainingError("validation split leaves no training samples")
    train_set = [samples[i] for i in train_idx]
    val_set = [samples[i] for i in val_idx] or train_set[:1]

    state = AdamState()
    val_losses: list[float] = []
    reports: list[EvalReport] = []
    t0 = time.perf_counter()
    if log:
        log(f"training variant={pipeline.cfg.variant} loss={loss_spec} "
            f"params={pipeline.parameter_count} train={len(train_set)} "
            f"val={len(val_set)}")
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        order = derive_rng(cfg.seed, "shuffle", epoch).permutation(len(train_set))
        for b0 in range(0, len(order), cfg.batch):
            batch = order[b0:b0 + cfg.batch]
            tape = Tape()
            leaves = pipeline.bind(tape)
            total = None
            for i in batch:
                term = compute_loss(pipeline, train_set[i], loss_spec, tape, leaves)
                total = term if total is None else total + term
            loss = smul(total, 1.0 / len(batch))
            if not np.isfinite(loss.item()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b0 // cfg.batch}")
            tape.backward(loss)
            grads = {}
            for name, leaf in leaves.items():
                g = leaf.grad
                if cfg.grad_clip is not None:
                    norm = float(np.sqrt(np.sum(g * g)))
                    if norm > cfg.grad_clip:
                        g = g * (cfg.grad_clip / norm)
                grads[name] = g
            adam_step(pipeline.params, grads, state, lr,
                      cfg.beta1, cfg.beta2, cfg.eps_adam)
        val_loss = _validation_loss(pipeline, val_set, loss_spec)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        val_losses.append(val_loss)
        reports.append(evaluate_samples(pipeline, val_set))
        if log:
            log(f"epoch {epoch:3d}  lr {lr:.2e}  val_loss {val_loss:.6f}  "
                f"val_rmse {reports[-1].rmse:.4f}")
    best_epoch = int(np.argmin(val_losses))
    return TrainResult(val_losses=val_losses, reports=reports,
                       best_epoch=best_epoch,
                       train_seconds=time.perf_counter() - t0)
