"""Error metrics and uncertainty-quality evaluation.

Sparsification curves measure how well an uncertainty map ranks errors:
pixels are removed from most to least uncertain and the RMSE of the
retained fraction is tracked, normalized by the full-set RMSE. The oracle
removes pixels in true-error order instead, which is the pointwise minimum
over removal orders, so a method's curve never dips below it. AUSE is the
mean gap between the two curves over the fraction grid; only the ordering
of the uncertainty enters, never its scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array

INVERSE_CLAMP_M = 1e-3  # floor on predictions before 1/d metrics


class EvalError(Exception):
    pass


@dataclass
class EvalReport:
    rmse: float
    mae: float
    irmse: float
    imae: float
    sparsification: list[tuple[float, float]]
    oracle: list[tuple[float, float]]
    ause: float
    n_pixels: int = 0

    def as_text(self) -> str:
        lines = [f"rmse={self.rmse!r}", f"mae={self.mae!r}",
                 f"irmse={self.irmse!r}", f"imae={self.imae!r}",
                 f"ause={self.ause!r}", f"n_pixels={self.n_pixels}"]
        return "\n".join(lines) + "\n"


def compute_metrics(pred: Array, gt: Array, valid: Array):
    """RMSE and MAE in signal units, inverse metrics per kilometre.

    Inverse errors are 1000 * (1/gt - 1/pred) with the prediction clamped
    below at 1 mm so empty estimates stay finite.
    """
    valid = np.asarray(valid, dtype=bool)
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise EvalError("no valid pixels to evaluate")
    p = np.asarray(pred, dtype=np.float64)[valid]
    g = np.asarray(gt, dtype=np.float64)[valid]
    if np.any(g <= 0.0):
        raise EvalError("inverse metrics need positive groundtruth")
    e = g - p
    rmse = float(np.sqrt(np.mean(e * e)))
    mae = float(np.mean(np.abs(e)))
    ie = 1000.0 * (1.0 / g - 1.0 / np.maximum(p, INVERSE_CLAMP_M))
    irmse = float(np.sqrt(np.mean(ie * ie)))
    imae = float(np.mean(np.abs(ie)))
    return rmse, mae, irmse, imae


def _fractions(bins: int) -> Array:
    return np.arange(bins) / bins


def sparsification_curve(err2: Array, unc: Array, bins: int = 100) -> Array:
    """Normalized retained-RMSE at fractions {0, 1/bins, ...} removed.

    Removal order is by uncertainty descending, stable on ties. A zero
    full-set RMSE yields the constant-1 curve by convention.
    """
    err2 = np.asarray(err2, dtype=np.float64).ravel()
    unc = np.asarray(unc, dtype=np.float64).ravel()
    if err2.shape != unc.shape:
        raise EvalError(f"error/uncertainty size mismatch: {err2.size} vs {unc.size}")
    if bins < 2:
        raise EvalError(f"bins must be >= 2, got {bins}")
    n = err2.size
    order = np.argsort(-unc, kind="stable")
    sorted_err2 = err2[order]
    # suffix sums avoid cancellation when few pixels remain
    suffix = np.concatenate([np.cumsum(sorted_err2[::-1])[::-1], [0.0]])
    removed = np.floor(_fractions(bins) * n).astype(int)
    retained = n - removed
    rmse = np.sqrt(suffix[removed] / retained)
    if rmse[0] == 0.0:
        return np.ones(bins)
    return rmse / rmse[0]


def oracle_curve(err2: Array, bins: int = 100) -> Array:
    """Sparsification with pixels removed in true-error order."""
    err2 = np.asarray(err2, dtype=np.float64).ravel()
    return sparsification_curve(err2, err2, bins)


def ause(pred: Array, gt: Array, unc: Array, bins: int = 100,
         valid: Array | None = None) -> float:
    """Mean gap between the uncertainty and oracle sparsification curves."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    unc = np.asarray(unc, dtype=np.float64)
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    err2 = (gt[valid] - pred[valid]) ** 2
    curve = sparsification_curve(err2, unc[valid], bins)
    oracle = oracle_curve(err2, bins)
    return float(np.mean(curve - oracle))


def evaluate_arrays(pred: Array, gt: Array, unc: Array,
                    valid: Array | None = None, bins: int = 100) -> EvalReport:
    """Full report for one prediction set (pixels may pool several images)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    unc = np.asarray(unc, dtype=np.float64)
    if valid is None:
        valid = gt > 0.0
    rmse, mae, irmse, imae = compute_metrics(pred, gt, valid)
    err2 = (gt[valid] - pred[valid]) ** 2
    curve = sparsification_curve(err2, unc[valid], bins)
    oracle = oracle_curve(err2, bins)
    fr = _fractions(bins)
    return EvalReport(
        rmse=rmse, mae=mae, irmse=irmse, imae=imae,
        sparsification=list(zip(fr.tolist(), curve.tolist())),
        oracle=list(zip(fr.tolist(), oracle.tolist())),
        ause=float(np.mean(curve - oracle)),
        n_pixels=int(np.count_nonzero(valid)),
    )


def evaluate_samples(pipeline, samples, bins: int = 100) -> EvalReport:
    """Evaluate a pipeline over a sample list, pooling all valid pixels."""
    from .networks import eval_uncertainty, pipeline_forward

    preds, gts, uncs = [], [], []
    for sample in samples:
        out = pipeline_forward(pipeline, sample.sparse)
        preds.append(np.asarray(out.prediction.data).ravel())
        gts.append(sample.gt.ravel())
        uncs.append(eval_uncertainty(out).ravel())
    return evaluate_arrays(np.concatenate(preds), np.concatenate(gts),
                           np.concatenate(uncs), bins=bins)


def _curve_csv(curve: list[tuple[float, float]]) -> str:
    lines = ["fraction,value"]
    lines += [f"{f!r},{v!r}" for f, v in curve]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir) -> None:
    """Key=value report plus one (fraction, value) CSV per curve."""
    from pathlib import Path

    from .gridio import atomic_write_bytes

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "report.txt", report.as_text().encode())
    atomic_write_bytes(out / "sparsification.csv",
                       _curve_csv(report.sparsification).encode())
    atomic_write_bytes(out / "oracle.csv", _curve_csv(report.oracle).encode())
