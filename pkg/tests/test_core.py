import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nconv import autodiff as ad
from nconv.autodiff import Tape, const
from nconv.core import (Applicability, BasisMatrix, ConfidencedGrid, NConvError,
                        RankDeficiencyError, conf_pool, conf_unpool,
                        conf_pool_pair, nc_basis_cov, nc_basis_solve,
                        nconv_backward, nconv_forward, nconv_layer, nconv_point)

TINY_EPS = 1e-300  # positive but invisible next to any supported denominator


def random_grid(rng, h=8, w=8, cmin=0.2):
    return ConfidencedGrid(values=rng.uniform(1.0, 20.0, (h, w)),
                           conf=rng.uniform(cmin, 1.5, (h, w)))


def gather_window(grid, i, j, k):
    """Zero-padded k x k neighbourhood as flat vectors (test-side oracle)."""
    pad = (k - 1) // 2
    y = np.zeros((k, k))
    c = np.zeros((k, k))
    h, w = grid.shape
    for di in range(-pad, pad + 1):
        for dj in range(-pad, pad + 1):
            if 0 <= i + di < h and 0 <= j + dj < w:
                y[di + pad, dj + pad] = grid.values[i + di, j + dj]
                c[di + pad, dj + pad] = grid.conf[i + di, j + dj]
    return y.ravel(), c.ravel()


class TestNConvForward:
    def test_one_dimensional_window(self):
        # direct scalar evaluation of the weighted-mean definition
        value, conf, ac = nconv_point(y=[2.0, 0.0, 4.0], c=[1.0, 0.0, 1.0],
                                      a=[1.0, 2.0, 1.0])
        assert value == pytest.approx(3.0, abs=0)
        assert conf == pytest.approx(0.5, abs=0)
        assert ac == pytest.approx(2.0, abs=0)

    def test_matches_pointwise_oracle(self, rng):
        grid = random_grid(rng)
        a = rng.uniform(0.2, 1.0, (3, 3))
        res = nconv_forward(grid, a, eps=0.5)
        for i in range(8):
            for j in range(8):
                y, c = gather_window(grid, i, j, 3)
                v, cf, ac = nconv_point(y, c, a.ravel(), eps=0.5)
                assert res.out.values[i, j] == pytest.approx(v, rel=1e-12)
                assert res.out.conf[i, j] == pytest.approx(cf, rel=1e-12)
                assert res.ac_raw[i, j] == pytest.approx(ac, rel=1e-12)

    def test_delta_kernel_is_identity(self, rng):
        vals = rng.uniform(1.0, 20.0, (6, 6))
        grid = ConfidencedGrid(values=vals, conf=np.ones((6, 6)))
        a = np.full((3, 3), TINY_EPS)
        a[1, 1] = 1.0
        res = nconv_forward(grid, a, eps=TINY_EPS)
        np.testing.assert_array_equal(res.out.values, vals)
        np.testing.assert_array_equal(res.out.conf, np.ones((6, 6)))

    def test_zero_confidence_degenerates_to_zero(self, rng):
        grid = ConfidencedGrid(values=rng.uniform(1, 5, (4, 4)), conf=np.zeros((4, 4)))
        res = nconv_forward(grid, rng.uniform(0.2, 1.0, (3, 3)), eps=1e-8)
        np.testing.assert_array_equal(res.out.values, np.zeros((4, 4)))
        np.testing.assert_array_equal(res.out.conf, np.zeros((4, 4)))

    def test_nonpositive_applicability_rejected(self, rng):
        grid = random_grid(rng, 4, 4)
        a = rng.uniform(0.2, 1.0, (3, 3))
        a[0, 0] = 0.0
        with pytest.raises(NConvError):
            nconv_forward(grid, a)

    def test_negative_confidence_rejected(self):
        with pytest.raises(NConvError):
            ConfidencedGrid(values=np.zeros((2, 2)), conf=np.array([[0.0, -0.1],
                                                                    [0.0, 0.0]]))


class TestNConvBackward:
    def test_value_gradient_wrt_confident_signal(self, rng):
        """With binary confidence, d value_i / d y_j = a_j / (<a|c> + eps)."""
        grid = ConfidencedGrid(values=rng.uniform(1, 5, (5, 5)),
                               conf=(rng.random((5, 5)) < 0.6).astype(float))
        a = np.full((3, 3), 0.7)
        eps = 1e-6
        res = nconv_forward(grid, a, eps=eps)
        i, j = 2, 2
        g_v = np.zeros((5, 5))
        g_v[i, j] = 1.0
        g_y, _, _ = nconv_backward(res.cache, g_v, np.zeros((5, 5)))
        den = res.ac_raw[i, j]
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                expect = (0.7 / (den + eps)) * grid.conf[i + di, j + dj]
                assert g_y[i + di, j + dj] == pytest.approx(expect, rel=1e-12)

    def test_conf_gradient_of_output_confidence(self, rng):
        """d conf_i / d c_j = a_j / <1|a> for every in-window neighbour j."""
        grid = random_grid(rng, 5, 5)
        a = rng.uniform(0.3, 1.2, (3, 3))
        res = nconv_forward(grid, a, eps=1e-8)
        i, j = 2, 3
        g_c = np.zeros((5, 5))
        g_c[i, j] = 1.0
        # only the confidence output is upstream, so the value path is inert
        _, g_conf, _ = nconv_backward(res.cache, np.zeros((5, 5)), g_c)
        asum = a.sum()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                assert g_conf[i + di, j + dj] == pytest.approx(
                    a[1 + di, 1 + dj] / asum, rel=1e-12)

    def test_all_gradient_blocks_match_finite_differences(self, rng):
        vals = rng.uniform(1.0, 5.0, (8, 8))
        conf = rng.uniform(0.2, 1.0, (8, 8))
        raw = rng.normal(size=(3, 3))
        wv = rng.normal(size=(8, 8))
        wc = rng.normal(size=(8, 8))
        wa = rng.normal(size=(8, 8))

        def loss_of(pieces):
            v, c, r = pieces
            ov, oc, oac = nconv_layer(v, c, r, eps=1e-3, a_min=1e-4)
            return ad.sum_all(ad.add(ad.add(ad.mul(ov, const(wv)),
                                            ad.mul(oc, const(wc))),
                                     ad.mul(oac, const(wa))))

        err = ad.finite_diff_check_many(loss_of, [vals, conf, raw], h=1e-5)
        assert err < 1e-4

    def test_missing_cache_rejected(self):
        with pytest.raises(NConvError):
            nconv_backward(None, np.zeros((2, 2)), np.zeros((2, 2)))


class TestBasisProjection:
    def test_naive_basis_reduces_to_weighted_mean(self, rng):
        y = rng.uniform(1, 5, 9)
        c = rng.uniform(0.1, 1.0, 9)
        a = rng.uniform(0.1, 1.0, 9)
        r, y_hat = nc_basis_solve(y, c, a, np.ones((9, 1)))
        v, _, _ = nconv_point(y, c, a, eps=0.0)
        assert r[0] == pytest.approx(v, rel=1e-12)
        np.testing.assert_allclose(y_hat, np.full(9, r[0]), rtol=1e-12)

    def test_orthonormal_basis_unweighted_projection(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(9, 3)))
        y = rng.normal(size=9)
        r, _ = nc_basis_solve(y, np.ones(9), np.ones(9), q)
        np.testing.assert_allclose(r, q.T @ y, atol=1e-12)

    def test_matches_independent_lstsq(self, rng):
        # SVD least-squares on the sqrt-weighted design is the oracle route
        from scipy.linalg import lstsq

        for _ in range(50):
            m = int(rng.integers(1, 4))
            B = rng.normal(size=(9, m))
            y = rng.normal(size=9)
            c = rng.uniform(0.1, 2.0, 9)
            a = rng.uniform(0.1, 2.0, 9)
            r, _ = nc_basis_solve(y, c, a, B)
            sw = np.sqrt(a * c)
            expect, *_ = lstsq(B * sw[:, None], sw * y)
            np.testing.assert_allclose(r, expect, atol=1e-8)

    def test_rank_deficiency_raises(self, rng):
        B = np.ones((9, 2))  # duplicate columns
        with pytest.raises(RankDeficiencyError):
            nc_basis_solve(rng.normal(size=9), np.ones(9), np.ones(9), B)

    def test_cov_naive_basis_equals_scalar_variance(self, rng):
        a = rng.uniform(0.1, 1.0, 9)
        c = rng.uniform(0.1, 1.0, 9)
        cov = nc_basis_cov(np.ones((9, 1)), a, c, sigma2=2.5)
        np.testing.assert_allclose(cov, np.full((9, 9), 2.5 / np.dot(a, c)),
                                   rtol=1e-12)

    def test_cov_halves_when_confidence_doubles(self, rng):
        B = rng.normal(size=(9, 3))
        a = rng.uniform(0.1, 1.0, 9)
        c = rng.uniform(0.1, 1.0, 9)
        cov1 = nc_basis_cov(B, a, c, sigma2=1.0)
        cov2 = nc_basis_cov(B, a, 2.0 * c, sigma2=1.0)
        np.testing.assert_allclose(cov2, 0.5 * cov1, rtol=1e-10)

    def test_cov_matches_bruteforce_and_is_psd(self, rng):
        for _ in range(50):
            m = int(rng.integers(1, 4))
            B = rng.normal(size=(9, m))
            a = rng.uniform(0.1, 2.0, 9)
            c = rng.uniform(0.1, 2.0, 9)
            s2 = float(rng.uniform(0.5, 3.0))
            cov = nc_basis_cov(B, a, c, s2)
            W = np.diag(a) @ np.diag(c)
            expect = s2 * B @ np.linalg.inv(B.T @ W @ B) @ B.T
            np.testing.assert_allclose(cov, expect, atol=1e-8)
            eigs = np.linalg.eigvalsh(0.5 * (cov + cov.T))
            assert eigs.min() >= -1e-10


class TestPooling:
    def test_selects_most_confident_cell_entry(self):
        g = ConfidencedGrid(values=np.array([[1.0, 9.0], [4.0, 4.0]]),
                            conf=np.array([[0.1, 0.9], [0.5, 0.5]]))
        pooled = conf_pool(g)
        assert pooled.values[0, 0] == 9.0
        assert pooled.conf[0, 0] == 0.9

    def test_tie_picks_first_in_row_major_order(self):
        g = ConfidencedGrid(values=np.array([[5.0, 6.0], [7.0, 8.0]]),
                            conf=np.full((2, 2), 0.3))
        pooled = conf_pool(g)
        assert pooled.values[0, 0] == 5.0

    def test_pool_unpool_of_constant_grid_is_identity(self):
        g = ConfidencedGrid(values=np.full((6, 6), 3.25), conf=np.full((6, 6), 0.6))
        back = conf_unpool(conf_pool(g), (6, 6))
        np.testing.assert_array_equal(back.values, g.values)
        np.testing.assert_array_equal(back.conf, g.conf)

    def test_odd_extents_pad_with_zero_confidence(self, rng):
        g = ConfidencedGrid(values=rng.uniform(1, 5, (5, 5)),
                            conf=rng.uniform(0.1, 1.0, (5, 5)))
        pooled = conf_pool(g)
        assert pooled.shape == (3, 3)
        assert pooled.conf[2, 2] == g.conf[4, 4]  # lone real entry beats padding

    def test_factor_must_be_two(self):
        g = ConfidencedGrid(values=np.zeros((4, 4)), conf=np.zeros((4, 4)))
        with pytest.raises(NConvError):
            conf_pool(g, factor=3)


class TestInvariances:
    @given(seed=st.integers(0, 10_000), lam=st.sampled_from([0.1, 7.0]))
    @settings(max_examples=25)
    def test_confidence_scaling(self, seed, lam):
        rng = np.random.default_rng(seed)
        grid = random_grid(rng, 6, 6, cmin=0.3)
        a = rng.uniform(0.2, 1.0, (3, 3))
        base = nconv_forward(grid, a, eps=TINY_EPS)
        scaled = nconv_forward(ConfidencedGrid(grid.values, lam * grid.conf), a,
                               eps=TINY_EPS)
        assert np.max(np.abs(scaled.out.values - base.out.values)) < 1e-10
        np.testing.assert_allclose(scaled.out.conf, lam * base.out.conf,
                                    rtol=1e-13, atol=0)
        np.testing.assert_allclose(scaled.ac_raw, lam * base.ac_raw,
                                    rtol=1e-13, atol=0)

    @given(seed=st.integers(0, 10_000), lam=st.sampled_from([0.25, 3.0]))
    @settings(max_examples=25)
    def test_applicability_scaling(self, seed, lam):
        rng = np.random.default_rng(seed)
        grid = random_grid(rng, 6, 6, cmin=0.3)
        a = rng.uniform(0.2, 1.0, (3, 3))
        base = nconv_forward(grid, a, eps=TINY_EPS)
        scaled = nconv_forward(grid, lam * a, eps=TINY_EPS)
        assert np.max(np.abs(scaled.out.values - base.out.values)) < 1e-10
        assert np.max(np.abs(scaled.out.conf - base.out.conf)) < 1e-10

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25)
    def test_convex_combination_bounds(self, seed):
        rng = np.random.default_rng(seed)
        grid = ConfidencedGrid(values=rng.uniform(-5, 25, (7, 7)),
                               conf=rng.uniform(0.0, 1.0, (7, 7)))
        a = rng.uniform(0.1, 1.0, (3, 3))
        res = nconv_forward(grid, a, eps=TINY_EPS)
        for i in range(7):
            for j in range(7):
                y, c = gather_window(grid, i, j, 3)
                if not np.any(c > 0):
                    continue
                lo, hi = y[c > 0].min(), y[c > 0].max()
                slack = 1e-12 * (1.0 + max(abs(lo), abs(hi)))
                assert lo - slack <= res.out.values[i, j] <= hi + slack

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=15)
    def test_all_ones_confidence_gives_unit_interior_confidence(self, seed):
        rng = np.random.default_rng(seed)
        grid = ConfidencedGrid(values=rng.uniform(1, 5, (8, 8)), conf=np.ones((8, 8)))
        res = nconv_forward(grid, rng.uniform(0.1, 1.0, (5, 5)), eps=TINY_EPS)
        np.testing.assert_allclose(res.out.conf[2:-2, 2:-2], 1.0, rtol=0, atol=1e-13)


class TestApplicability:
    def test_gaussian_init_realizes_near_unit_sum_lowpass(self):
        app = Applicability.gaussian(5)
        a = app.realized()
        assert a.min() > 0
        assert a.sum() == pytest.approx(1.0, rel=0.05)
        assert a[2, 2] == a.max()

    def test_realized_floor(self):
        app = Applicability(raw=np.full((3, 3), -60.0), a_min=1e-4)
        np.testing.assert_allclose(app.realized(), 1e-4, rtol=1e-6)

    def test_even_kernel_rejected(self):
        with pytest.raises(NConvError):
            Applicability(raw=np.zeros((4, 4)))
