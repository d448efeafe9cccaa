"""Training objectives for the densification pipeline.

Plain L1/L2 regression on valid groundtruth, plus heteroscedastic
negative-log-likelihood losses where the network also predicts a per-pixel
variance term ``s``:

    gauss    mean over valid of  e^2 / s  +  log s
    exp      mean over valid of  e^2 / exp(s)  +  s        (robustified: the
             exponential stretches the variance axis, softening the penalty
             on large residuals that break the Gaussian error model)
    laplace  mean over valid of  |e| / s  +  log s

Constant offsets and the global 1/2 of the Gaussian NLL are dropped; only
pixels with positive groundtruth contribute. The gauss regularizer is
evaluated as -log(1/s), sharing the reciprocal with the data term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, DiffTensor

S_MIN_DEFAULT = 1e-6


class LossError(Exception):
    pass


@dataclass
class LossInput:
    """Prediction (and optional variance map) against sparse groundtruth.

    ``valid`` marks pixels with usable groundtruth; the loss averages over
    exactly those pixels.
    """

    prediction: DiffTensor
    s: DiffTensor | None
    gt: Array
    valid: Array

    @classmethod
    def from_arrays(cls, prediction, gt, s=None) -> "LossInput":
        pred = prediction if isinstance(prediction, DiffTensor) else ad.const(prediction)
        st = None if s is None else (s if isinstance(s, DiffTensor) else ad.const(s))
        gt = np.asarray(gt, dtype=np.float64)
        return cls(prediction=pred, s=st, gt=gt, valid=gt > 0.0)


def _masked_mean(term: DiffTensor, valid: Array) -> DiffTensor:
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise LossError("no valid groundtruth pixels")
    mask = ad.const(valid.astype(np.float64))
    return ad.smul(ad.sum_all(ad.mul(term, mask)), 1.0 / n)


def loss_plain(inp: LossInput, norm: str = "l2") -> DiffTensor:
    """Mean |e| or e^2 over valid pixels, e = gt - prediction."""
    if norm not in ("l1", "l2"):
        raise LossError(f"unknown norm '{norm}'")
    e = ad.sub(ad.const(inp.gt), inp.prediction)
    term = ad.absval(e) if norm == "l1" else ad.square(e)
    return _masked_mean(term, inp.valid)


def loss_pncnn(inp: LossInput, variant: str = "gauss",
               s_min: float = S_MIN_DEFAULT) -> DiffTensor:
    """Negative log likelihood with a predicted per-pixel variance term.

    For ``gauss`` and ``laplace`` the variance map must sit on or above the
    configured floor. The ``exp`` variant treats ``s`` as a log-variance, so
    any finite value is legal there.
    """
    if variant not in ("gauss", "exp", "laplace"):
        raise LossError(f"unknown loss variant '{variant}'")
    if inp.s is None:
        raise LossError(f"loss variant '{variant}' requires a variance map")
    if variant != "exp" and float(np.min(inp.s.data)) < s_min:
        raise LossError(
            f"variance term below floor {s_min:g} (min {np.min(inp.s.data):g})")
    e = ad.sub(ad.const(inp.gt), inp.prediction)
    if variant == "gauss":
        inv_s = ad.div(ad.const(np.ones_like(inp.gt)), inp.s, eps=0.0)
        term = ad.sub(ad.mul(ad.square(e), inv_s), ad.log(inv_s))
    elif variant == "laplace":
        term = ad.add(ad.div(ad.absval(e), inp.s, eps=0.0), ad.log(inp.s))
    else:  # exp: data term e^2 * exp(-s), regularizer log(exp(s)) = s
        term = ad.add(ad.mul(ad.square(e), ad.exp(ad.smul(inp.s, -1.0))), inp.s)
    return _masked_mean(term, inp.valid)


def default_loss_for(variant: str) -> str:
    """Loss spec a pipeline variant trains with unless overridden."""
    return {"ncnn-binary": "l2", "ncnn-conf": "l2",
            "pncnn": "gauss", "pncnn-exp": "exp"}[variant]
