"""Normalized convolution over signal/confidence pairs.

A confidence-equipped signal pairs each sample with a non-negative weight;
zero confidence marks missing data. Normalized convolution estimates each
point as a confidence- and applicability-weighted least-squares projection
of its neighbourhood onto a set of basis functions. With the all-ones
(naive) basis this collapses to a weighted local mean

    value_i = <a | y*c> / <a | c>,     conf_i = <a | c> / <1 | a>,

where ``a`` is the learnable non-negative applicability kernel and the
propagated confidence tells downstream layers how much local support each
estimate had. The general basis solver and its covariance are provided for
verification: with per-sample inverse variances a*c the projection is
exactly a generalized least-squares fit whose fitted-value covariance is
sigma^2 B (B^T W_a W_c B)^-1 B^T.

Everything here is pure numpy; tape-integrated layer ops live at the
bottom and reuse the same arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array, DiffTensor

COND_LIMIT = 1e12


class NConvError(Exception):
    pass


class RankDeficiencyError(NConvError):
    pass


@dataclass
class ConfidencedGrid:
    """A 2-D signal grid with a same-shape non-negative confidence grid."""

    values: Array
    conf: Array

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.conf = np.asarray(self.conf, dtype=np.float64)
        if self.values.shape != self.conf.shape:
            raise NConvError(
                f"values shape {self.values.shape} != conf shape {self.conf.shape}")
        if np.any(self.conf < 0.0):
            raise NConvError(f"negative confidence (min {self.conf.min():g})")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class Applicability:
    """Non-negative k x k kernel, reparameterized from unconstrained weights.

    The realized kernel is softplus(raw) + a_min, so it stays strictly
    positive under unconstrained optimization. ``a_min`` defaults to 1e-4;
    tests that need an effectively-delta kernel may lower it.
    """

    raw: Array
    a_min: float = 1e-4

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        k = self.raw.shape[0]
        if self.raw.ndim != 2 or self.raw.shape != (k, k) or k % 2 == 0:
            raise NConvError(f"applicability must be odd square, got {self.raw.shape}")

    @property
    def k(self) -> int:
        return self.raw.shape[0]

    def realized(self) -> Array:
        return np.logaddexp(0.0, self.raw) + self.a_min

    @classmethod
    def gaussian(cls, k: int, a_min: float = 1e-4,
                 rng: np.random.Generator | None = None,
                 jitter: float = 0.02) -> "Applicability":
        """Init so the realized kernel is approximately a unit-sum Gaussian
        low-pass with sigma = k/4 (optionally jittered to break symmetry)."""
        sigma = k / 4.0
        r = np.arange(k) - (k - 1) / 2.0
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
        if rng is not None and jitter > 0.0:
            g = g * (1.0 + jitter * rng.standard_normal((k, k)))
        g = np.maximum(g / g.sum(), 2.0 * a_min)
        return cls(raw=np.log(np.expm1(g - a_min)), a_min=a_min)


@dataclass
class BasisMatrix:
    """Columns are basis functions sampled over an n-point neighbourhood."""

    B: Array

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.B.ndim != 2 or self.B.shape[1] > self.B.shape[0]:
            raise NConvError(f"basis must be n x m with m <= n, got {self.B.shape}")


# ---------------------------------------------------------------------------
# naive-basis forward / backward on grids
# ---------------------------------------------------------------------------

@dataclass
class NConvCache:
    values: Array
    conf: Array
    a: Array
    raw: Array | None
    num: Array
    den: Array
    eps: float
    xp_shape: tuple[int, ...]
    cols_yc: Array
    cols_c: Array


@dataclass
class NConvResult:
    out: ConfidencedGrid
    ac_raw: Array
    cache: NConvCache


def nconv_point(y: Array, c: Array, a: Array, eps: float = 0.0):
    """Scalar reference: one neighbourhood as flat vectors.

    Returns (value, confidence, accumulated weight <a|c>).
    """
    y, c, a = (np.asarray(v, dtype=np.float64).ravel() for v in (y, c, a))
    num = float(np.dot(a, y * c))
    den = float(np.dot(a, c))
    return num / (den + eps), den / float(a.sum()), den


def nconv_forward(grid: ConfidencedGrid, app: Applicability | Array,
                  eps: float = 1e-8) -> NConvResult:
    """Confidence-weighted local mean plus propagated confidence.

    Outside the grid both signal and confidence are zero-padded, so the
    border contributes no support. ``ac_raw`` is the unnormalized
    accumulated weight <a|c>, needed by the predictive-variance head.
    """
    if isinstance(app, Applicability):
        a = app.realized()
        raw = app.raw
    else:
        a = np.asarray(app, dtype=np.float64)
        raw = None
    if np.min(a) <= 0.0:
        raise NConvError(
            f"realized applicability must be positive (min {np.min(a):g})")
    k = a.shape[0]
    pad = (k - 1) // 2
    kern = a[None, None]
    yc = (grid.values * grid.conf)[None]
    num, cols_yc, xp_shape = ad.corr2_forward(yc, kern, 1, pad)
    den, cols_c, _ = ad.corr2_forward(grid.conf[None], kern, 1, pad)
    num, den = num[0], den[0]
    asum = float(a.sum())
    out = ConfidencedGrid(values=num / (den + eps), conf=den / asum)
    cache = NConvCache(grid.values, grid.conf, a, raw, num, den, eps,
                       xp_shape, cols_yc, cols_c)
    return NConvResult(out=out, ac_raw=den, cache=cache)


def nconv_backward(cache: NConvCache, g_values: Array, g_conf: Array,
                   g_ac: Array | None = None):
    """Analytic gradients of (out.values, out.conf, ac_raw) w.r.t. inputs.

    Returns (g_signal, g_confidence, g_applicability) where the last is
    w.r.t. the unconstrained raw weights when the forward pass was given an
    Applicability, otherwise w.r.t. the realized kernel.
    """
    if cache is None:
        raise NConvError("nconv_backward requires the forward cache")
    a, num, den, eps = cache.a, cache.num, cache.den, cache.eps
    k = a.shape[0]
    pad = (k - 1) // 2
    asum = float(a.sum())
    d = den + eps
    g_num = g_values / d
    g_den = -g_values * num / (d * d) + g_conf / asum
    if g_ac is not None:
        g_den = g_den + g_ac
    kern = a[None, None]
    g_yc = ad.corr2_input_grad(g_num[None], kern, cache.xp_shape, 1, pad)[0]
    g_c_from_den = ad.corr2_input_grad(g_den[None], kern, cache.xp_shape, 1, pad)[0]
    g_signal = g_yc * cache.conf
    g_confidence = g_yc * cache.values + g_c_from_den
    g_a = (ad.corr2_kernel_grad(g_num[None], cache.cols_yc, (1, 1, k, k))
           + ad.corr2_kernel_grad(g_den[None], cache.cols_c, (1, 1, k, k)))[0, 0]
    # conf = den / sum(a): the normalizer couples every kernel entry
    g_a = g_a - float(np.sum(g_conf * den)) / (asum * asum)
    if cache.raw is not None:
        g_a = g_a * ad.sigmoid(cache.raw)
    return g_signal, g_confidence, g_a


# ---------------------------------------------------------------------------
# general basis projection (verification path)
# ---------------------------------------------------------------------------

def _normal_matrix(B: Array, w: Array) -> Array:
    return B.T @ (B * w[:, None])


def nc_basis_solve(y: Array, c: Array, a: Array,
                   basis: BasisMatrix | Array) -> tuple[Array, Array]:
    """Weighted least-squares projection of a neighbourhood onto a basis.

    Solves r = (B^T W_a W_c B)^-1 B^T W_a W_c y and returns (r, B r). With
    inverse variances a*c this is identically the generalized
    least-squares estimate.
    """
    B = basis.B if isinstance(basis, BasisMatrix) else np.asarray(basis, float)
    y = np.asarray(y, dtype=np.float64).ravel()
    c = np.asarray(c, dtype=np.float64).ravel()
    a = np.asarray(a, dtype=np.float64).ravel()
    w = a * c
    M = _normal_matrix(B, w)
    if np.linalg.cond(M) > COND_LIMIT:
        raise RankDeficiencyError(
            f"normal matrix condition number exceeds {COND_LIMIT:g}")
    r = np.linalg.solve(M, B.T @ (w * y))
    return r, B @ r


def nc_basis_cov(basis: BasisMatrix | Array, a: Array, c: Array,
                 sigma2: float) -> Array:
    """Covariance sigma^2 B (B^T W_a W_c B)^-1 B^T of the fitted values."""
    B = basis.B if isinstance(basis, BasisMatrix) else np.asarray(basis, float)
    if sigma2 <= 0.0:
        raise NConvError(f"sigma2 must be positive, got {sigma2:g}")
    w = np.asarray(a, float).ravel() * np.asarray(c, float).ravel()
    M = _normal_matrix(B, w)
    if np.linalg.cond(M) > COND_LIMIT:
        raise RankDeficiencyError(
            f"normal matrix condition number exceeds {COND_LIMIT:g}")
    return sigma2 * (B @ np.linalg.solve(M, B.T))


# ---------------------------------------------------------------------------
# confidence-aware pooling
# ---------------------------------------------------------------------------

def _pad_even(arr: Array, fill: float) -> Array:
    h, w = arr.shape
    return np.pad(arr, ((0, h % 2), (0, w % 2)), constant_values=fill)


def _pool_cells(arr: Array) -> Array:
    h, w = arr.shape
    return (arr.reshape(h // 2, 2, w // 2, 2)
            .swapaxes(1, 2)
            .reshape(h // 2, w // 2, 4))


def conf_pool(grid: ConfidencedGrid, factor: int = 2) -> ConfidencedGrid:
    """Halve resolution keeping, per 2x2 cell, the most confident entry.

    Ties select the first entry in row-major order. Odd extents are padded
    on the right/bottom with zero confidence before pooling.
    """
    if factor != 2:
        raise NConvError("only pooling factor 2 is supported")
    v = _pad_even(grid.values, 0.0)
    c = _pad_even(grid.conf, 0.0)
    idx = np.argmax(_pool_cells(c), axis=-1)
    take = lambda arr: np.take_along_axis(_pool_cells(arr), idx[..., None], -1)[..., 0]
    return ConfidencedGrid(values=take(v), conf=take(c))


def conf_unpool(grid: ConfidencedGrid, target_shape: tuple[int, int]) -> ConfidencedGrid:
    """Nearest-neighbour upsampling of values and confidences to a target shape."""
    h, w = target_shape
    up = lambda arr: np.repeat(np.repeat(arr, 2, 0), 2, 1)[:h, :w]
    return ConfidencedGrid(values=up(grid.values), conf=up(grid.conf))


# ---------------------------------------------------------------------------
# tape-integrated layer ops
# ---------------------------------------------------------------------------

def nconv_layer(y: DiffTensor, c: DiffTensor, raw: DiffTensor, *,
                eps: float = 1e-8, a_min: float = 1e-4):
    """Differentiable normalized convolution of (H, W) signal/confidence maps.

    Returns (values, confidence, accumulated weight). Gradients flow to the
    signal, the confidence, and the unconstrained kernel weights.
    """
    app = Applicability(raw=raw.data, a_min=a_min)
    res = nconv_forward(ConfidencedGrid(y.data, c.data), app, eps)
    cache = res.cache

    def build(needs):
        def bwd(g_v, g_c, g_ac):
            gs, gc, graw = nconv_backward(cache, g_v, g_c, g_ac)
            return (gs if needs[0] else None,
                    gc if needs[1] else None,
                    graw if needs[2] else None)

        return bwd

    return ad.apply_op("nconv", (y, c, raw),
                     (res.out.values, res.out.conf, res.ac_raw), build)


def conf_pool_pair(v: DiffTensor, c: DiffTensor):
    """Differentiable confidence-argmax 2x pooling of a value/confidence pair."""
    vp = _pad_even(v.data, 0.0)
    cp = _pad_even(c.data, 0.0)
    idx = np.argmax(_pool_cells(cp), axis=-1)
    take = lambda arr: np.take_along_axis(_pool_cells(arr), idx[..., None], -1)[..., 0]
    out_v, out_c = take(vp), take(cp)

    def build(needs):
        hp, wp = vp.shape
        h, w = v.data.shape

        def scatter(g):
            cells = np.zeros((hp // 2, wp // 2, 4))
            np.put_along_axis(cells, idx[..., None], g[..., None], axis=-1)
            full = (cells.reshape(hp // 2, wp // 2, 2, 2)
                    .swapaxes(1, 2)
                    .reshape(hp, wp))
            return full[:h, :w]

        def bwd(g_v, g_c):
            return (scatter(g_v) if needs[0] else None,
                    scatter(g_c) if needs[1] else None)

        return bwd

    return ad.apply_op("conf_pool", (v, c), (out_v, out_c), build)


ad.register_external_op("nconv", nconv_layer)
ad.register_external_op("conf_pool", conf_pool_pair)


def conf_unpool_pair(v: DiffTensor, c: DiffTensor, target_shape: tuple[int, int]):
    """Nearest-neighbour unpooling of both maps (composite of primitives)."""
    h, w = target_shape
    return (ad.crop2(ad.upsample2_nearest(v), h, w),
            ad.crop2(ad.upsample2_nearest(c), h, w))
