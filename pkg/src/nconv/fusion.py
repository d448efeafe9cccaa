"""Confidence-aware fusion of ensemble predictions, per pixel.

Four schemes: plain mean, confidence-weighted mean, picking the most
confident member, and the per-pixel maximum-likelihood estimate under a
Gaussian mixture whose components sit at the member predictions with
confidences as (normalized) weights and a shared variance v^2. The 1-D
mixture has at most as many modes as components, so restarting a local
ascent from every prediction and keeping the best restart finds the
global maximum.

Member confidences are typically inverse predictive variances (1/s).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array

SCHEMES = ("mean", "wmean", "maxconf", "mle")


class FusionError(Exception):
    pass


@dataclass
class EnsembleSlice:
    """One pixel across an ensemble: member predictions and confidences."""

    preds: Array
    confs: Array

    def __post_init__(self):
        self.preds = np.asarray(self.preds, dtype=np.float64).ravel()
        self.confs = np.asarray(self.confs, dtype=np.float64).ravel()
        if self.preds.size != self.confs.size or self.preds.size < 1:
            raise FusionError(
                f"need matching non-empty members, got {self.preds.size} preds "
                f"and {self.confs.size} confs")
        if np.any(self.confs < 0.0):
            raise FusionError(f"negative confidence (min {self.confs.min():g})")
        if not np.any(self.confs > 0.0):
            raise FusionError("all member confidences are zero")


def fuse_deterministic(slc: EnsembleSlice, scheme: str) -> float:
    """mean, confidence-weighted mean, or most-confident member.

    maxconf ties resolve to the lowest member index.
    """
    if scheme == "mean":
        return float(np.mean(slc.preds))
    if scheme == "wmean":
        total = float(np.sum(slc.confs))
        if total <= 0.0:
            raise FusionError("weighted mean needs a positive confidence sum")
        return float(np.dot(slc.confs, slc.preds) / total)
    if scheme == "maxconf":
        return float(slc.preds[int(np.argmax(slc.confs))])
    raise FusionError(f"unknown deterministic scheme '{scheme}'")


def mixture_likelihood(x, preds: Array, confs: Array, v2: float):
    """Normalized-weight Gaussian mixture density at x (broadcasts over x)."""
    x = np.asarray(x, dtype=np.float64)
    w = confs / confs.sum()
    z = 1.0 / np.sqrt(2.0 * np.pi * v2)
    d = x[..., None] - preds
    return z * np.sum(w * np.exp(-d * d / (2.0 * v2)), axis=-1)


def _mixture_grad(x: Array, preds: Array, confs: Array, v2: float) -> Array:
    w = confs / confs.sum()
    z = 1.0 / np.sqrt(2.0 * np.pi * v2)
    d = x[..., None] - preds
    return z * np.sum(w * np.exp(-d * d / (2.0 * v2)) * (-d / v2), axis=-1)


def fuse_mle(slc: EnsembleSlice, v2: float = 0.1, max_steps: int = 500,
             step_lr: float = 0.01, tol: float = 1e-7) -> float:
    """Gaussian-mixture MLE by gradient ascent restarted from each prediction.

    Each restart runs at most ``max_steps`` fixed-size ascent steps with
    early stopping once the position moves by less than ``tol``; the
    restart with the highest likelihood wins (ties: lowest restart index).
    """
    if v2 <= 0.0:
        raise FusionError(f"v2 must be positive, got {v2:g}")
    x = slc.preds.copy()
    active = np.ones(x.size, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        step = step_lr * _mixture_grad(x[idx], slc.preds, slc.confs, v2)
        x[idx] += step
        active[idx[np.abs(step) < tol]] = False
        if not active.any():
            break
    lik = mixture_likelihood(x, slc.preds, slc.confs, v2)
    return float(x[int(np.argmax(lik))])


def fuse_maps(preds: Array, confs: Array, scheme: str, v2: float = 0.1,
              max_steps: int = 500, step_lr: float = 0.01,
              tol: float = 1e-7) -> Array:
    """Fuse (N, H, W) prediction/confidence stacks pixelwise.

    The MLE scheme runs all pixels' restarts as one vectorized ascent.
    """
    preds = np.asarray(preds, dtype=np.float64)
    confs = np.asarray(confs, dtype=np.float64)
    if preds.shape != confs.shape or preds.ndim != 3:
        raise FusionError(
            f"expected matching (N, H, W) stacks, got {preds.shape} and {confs.shape}")
    if scheme not in SCHEMES:
        raise FusionError(f"unknown fusion scheme '{scheme}'")
    n, h, w = preds.shape
    if scheme == "mean":
        return preds.mean(axis=0)
    if scheme == "wmean":
        total = confs.sum(axis=0)
        if np.any(total <= 0.0):
            raise FusionError("weighted mean needs positive confidence sums")
        return (confs * preds).sum(axis=0) / total
    if scheme == "maxconf":
        idx = np.argmax(confs, axis=0)
        return np.take_along_axis(preds, idx[None], axis=0)[0]

    p = preds.reshape(n, -1).T        # (P, N)
    c = confs.reshape(n, -1).T
    csum = c.sum(axis=1, keepdims=True)
    if np.any(csum <= 0.0):
        raise FusionError("MLE fusion needs a positive confidence sum per pixel")
    wgt = c / csum
    x = p.copy()                      # restarts: one per member
    for _ in range(max_steps):
        d = x[:, :, None] - p[:, None, :]
        g = np.sum(wgt[:, None, :] * np.exp(-d * d / (2.0 * v2)) * (-d / v2), axis=-1)
        step = step_lr / np.sqrt(2.0 * np.pi * v2) * g
        x += step
        if np.max(np.abs(step)) < tol:
            break
    d = x[:, :, None] - p[:, None, :]
    lik = np.sum(wgt[:, None, :] * np.exp(-d * d / (2.0 * v2)), axis=-1)
    best = np.argmax(lik, axis=1)
    fused = np.take_along_axis(x, best[:, None], axis=1)[:, 0]
    return fused.reshape(h, w)
