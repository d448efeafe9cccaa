"""Synthetic piecewise-smooth depth scenes with controlled disturbance.

Scenes are tilted planes plus ellipsoidal bumps/dents and straight-line
step discontinuities, clipped to the declared metric range. Sparsification
keeps a random pixel fraction; a sub-fraction of the kept points is
disturbed either by copying the value of a pixel at least 8 px away (the
``swap`` model, imitating projection errors where depth from another
surface lands on a pixel) or by a uniform +-1..5 m offset, and i.i.d.
Gaussian noise is added to every kept point. The returned outlier mask
records exactly which kept pixels were disturbed; it exists for evaluation
only and is never an input to training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array
from .seeding import derive_rng

MIN_STORED_DEPTH = 1.0 / 64.0  # keep disturbed points distinguishable from "missing"


class SynthError(Exception):
    pass


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: tuple[int, int] = (64, 64)
    depth_range: tuple[float, float] = (2.0, 20.0)
    n_bumps: int = 3
    n_steps: int = 1
    # plane tilt and step height control how wrong a far-copied value is
    # relative to the smoothing error at discontinuities
    tilt: float = 0.07
    step_height: tuple[float, float] = (1.0, 2.5)
    bump_height: tuple[float, float] = (0.3, 1.5)

    def __post_init__(self):
        lo, hi = self.depth_range
        if not (0.0 < lo < hi):
            raise SynthError(f"bad depth range {self.depth_range}")


@dataclass(frozen=True)
class DisturbSpec:
    density: float = 0.05
    outlier_frac: float = 0.1
    outlier_model: str = "swap"  # or "offset"
    noise_sigma: float = 0.03
    swap_min_dist: int = 8

    def __post_init__(self):
        if not (0.0 < self.density <= 1.0):
            raise SynthError(f"density must be in (0, 1], got {self.density}")
        if not (0.0 <= self.outlier_frac <= 1.0):
            raise SynthError(f"outlier_frac must be in [0, 1], got {self.outlier_frac}")
        if self.outlier_model not in ("swap", "offset"):
            raise SynthError(f"unknown outlier model '{self.outlier_model}'")


@dataclass
class Sample:
    sparse: Array        # 0 marks missing
    gt: Array            # dense, strictly positive
    outlier_mask: Array  # bool, True where a kept pixel was disturbed


def generate_scene(spec: SceneSpec, rng: np.random.Generator) -> Array:
    h, w = spec.size
    lo, hi = spec.depth_range
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = rng.uniform(lo + 0.25 * (hi - lo), hi - 0.25 * (hi - lo))
    gx, gy = rng.uniform(-spec.tilt, spec.tilt, size=2)
    depth = base + gx * (xx - w / 2) + gy * (yy - h / 2)
    for _ in range(spec.n_bumps):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.15 * h, 0.4 * h), rng.uniform(0.15 * w, 0.4 * w)
        amp = rng.uniform(*spec.bump_height) * rng.choice([-1.0, 1.0])
        q = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        depth += amp * np.sqrt(np.maximum(1.0 - q, 0.0))
    for _ in range(spec.n_steps):
        py, px = rng.uniform(0, h), rng.uniform(0, w)
        theta = rng.uniform(0, 2 * np.pi)
        side = (yy - py) * np.cos(theta) + (xx - px) * np.sin(theta) > 0
        depth += np.where(side,
                          rng.uniform(*spec.step_height) * rng.choice([-1.0, 1.0]),
                          0.0)
    return np.clip(depth, lo, hi)


def _sample_far_pixels(rng: np.random.Generator, h: int, w: int,
                       rows: Array, cols: Array, min_dist: int):
    """For each (row, col), draw another pixel at Chebyshev distance >= min_dist."""
    n = rows.size
    sr = rng.integers(0, h, size=n)
    sc = rng.integers(0, w, size=n)
    for _ in range(64):
        near = np.maximum(np.abs(sr - rows), np.abs(sc - cols)) < min_dist
        if not near.any():
            break
        sr[near] = rng.integers(0, h, size=int(near.sum()))
        sc[near] = rng.integers(0, w, size=int(near.sum()))
    return sr, sc


def disturb_scene(gt: Array, spec: DisturbSpec, rng: np.random.Generator) -> Sample:
    h, w = gt.shape
    keep = None
    for _ in range(10):
        candidate = rng.random((h, w)) < spec.density
        if candidate.any():
            keep = candidate
            break
    if keep is None:
        raise SynthError("density too low: no points kept after 10 draws")
    rows, cols = np.nonzero(keep)
    values = gt[rows, cols].copy()
    n_out = int(round(spec.outlier_frac * rows.size))
    out_sel = rng.permutation(rows.size)[:n_out]
    if n_out:
        if spec.outlier_model == "swap":
            sr, sc = _sample_far_pixels(rng, h, w, rows[out_sel], cols[out_sel],
                                        spec.swap_min_dist)
            values[out_sel] = gt[sr, sc]
        else:
            offs = rng.uniform(1.0, 5.0, size=n_out) * rng.choice([-1.0, 1.0], size=n_out)
            values[out_sel] = values[out_sel] + offs
    if spec.noise_sigma > 0.0:
        values = values + spec.noise_sigma * rng.standard_normal(rows.size)
    values = np.maximum(values, MIN_STORED_DEPTH)
    sparse = np.zeros_like(gt)
    sparse[rows, cols] = values
    mask = np.zeros(gt.shape, dtype=bool)
    mask[rows[out_sel], cols[out_sel]] = True
    return Sample(sparse=sparse, gt=gt, outlier_mask=mask)


def synth_dataset(scene: SceneSpec, disturb: DisturbSpec, n_images: int) -> list[Sample]:
    """Deterministic dataset; image i uses streams derived from (seed, i)."""
    samples = []
    for i in range(n_images):
        gt = generate_scene(scene, derive_rng(scene.seed, "scene", i))
        samples.append(disturb_scene(gt, disturb, derive_rng(scene.seed, "disturb", i)))
    return samples
