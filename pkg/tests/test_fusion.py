import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nconv.fusion import (EnsembleSlice, FusionError, fuse_deterministic,
                          fuse_maps, fuse_mle, mixture_likelihood)


def grid_search_argmax(preds, confs, v2, points=2000, refine=0):
    """Independent dense 1-D search over [min - 3 sqrt(v2), max + 3 sqrt(v2)].

    ``refine`` adds zoom passes around the best cell, shrinking the
    quantization error below any tolerance under test.
    """
    lo = float(np.min(preds)) - 3.0 * np.sqrt(v2)
    hi = float(np.max(preds)) + 3.0 * np.sqrt(v2)
    for _ in range(refine + 1):
        xs = np.linspace(lo, hi, points)
        lik = mixture_likelihood(xs, np.asarray(preds, float),
                                 np.asarray(confs, float), v2)
        best = int(np.argmax(lik))
        width = (hi - lo) / (points - 1)
        lo, hi = xs[best] - width, xs[best] + width
    return float(xs[best])


class TestDeterministicSchemes:
    def test_symmetric_tie(self):
        slc = EnsembleSlice(preds=[1.0, 3.0], confs=[1.0, 1.0])
        assert fuse_deterministic(slc, "mean") == 2.0
        assert fuse_deterministic(slc, "wmean") == 2.0
        assert fuse_deterministic(slc, "maxconf") == 1.0  # tie -> lowest index

    def test_weighted_hand_oracle(self):
        slc = EnsembleSlice(preds=[1.0, 3.0], confs=[1.0, 3.0])
        assert fuse_deterministic(slc, "wmean") == pytest.approx(2.5)
        assert fuse_deterministic(slc, "maxconf") == 3.0

    def test_singleton(self):
        slc = EnsembleSlice(preds=[4.2], confs=[0.7])
        for scheme in ("mean", "wmean", "maxconf"):
            assert fuse_deterministic(slc, scheme) == 4.2
        assert fuse_mle(slc) == pytest.approx(4.2, abs=1e-9)

    def test_all_zero_confidences_rejected(self):
        with pytest.raises(FusionError):
            EnsembleSlice(preds=[1.0, 2.0], confs=[0.0, 0.0])

    def test_unknown_scheme(self):
        with pytest.raises(FusionError):
            fuse_deterministic(EnsembleSlice(preds=[1.0], confs=[1.0]), "median")

    @given(seed=st.integers(0, 5000))
    @settings(max_examples=30)
    def test_wmean_with_equal_confidences_is_mean(self, seed):
        rng = np.random.default_rng(seed)
        preds = rng.uniform(-5, 5, int(rng.integers(1, 8)))
        slc = EnsembleSlice(preds=preds, confs=np.full(preds.size, 0.4))
        assert fuse_deterministic(slc, "wmean") == pytest.approx(
            fuse_deterministic(slc, "mean"), rel=1e-12)


class TestMLE:
    def test_coincident_components(self):
        slc = EnsembleSlice(preds=[2.5, 2.5, 2.5], confs=[1.0, 0.5, 2.0])
        assert fuse_mle(slc) == pytest.approx(2.5, abs=1e-12)

    def test_separated_modes_pick_the_heavier(self):
        slc = EnsembleSlice(preds=[0.0, 10.0], confs=[1.0, 5.0])
        got = fuse_mle(slc, v2=0.1)
        oracle = grid_search_argmax([0.0, 10.0], [1.0, 5.0], 0.1, refine=2)
        assert got == pytest.approx(oracle, abs=1e-4)
        assert got == pytest.approx(10.0, abs=1e-6)

    def test_close_components_merge_at_midpoint(self):
        slc = EnsembleSlice(preds=[0.0, 0.1], confs=[1.0, 1.0])
        got = fuse_mle(slc, v2=0.1)
        oracle = grid_search_argmax([0.0, 0.1], [1.0, 1.0], 0.1, refine=2)
        assert got == pytest.approx(oracle, abs=1e-4)
        # flat merged mode: early stopping resolves the argmax to ~1e-5
        assert got == pytest.approx(0.05, abs=1e-5)

    def test_restart_guarantee(self, rng):
        for _ in range(25):
            n = int(rng.integers(1, 6))
            slc = EnsembleSlice(preds=rng.uniform(0, 1, n),
                                confs=rng.uniform(0.05, 2.0, n))
            got = fuse_mle(slc, v2=0.1)
            best = mixture_likelihood(np.array(got), slc.preds, slc.confs, 0.1)
            at_preds = mixture_likelihood(slc.preds, slc.preds, slc.confs, 0.1)
            assert best >= at_preds.max() - 1e-12

    @given(seed=st.integers(0, 5000))
    @settings(max_examples=30)
    def test_matches_grid_search_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 6))
        preds = rng.uniform(0, 1, n)
        confs = rng.uniform(0.05, 2.0, n)
        got = fuse_mle(EnsembleSlice(preds=preds, confs=confs), v2=0.1)
        assert got == pytest.approx(grid_search_argmax(preds, confs, 0.1),
                                    abs=1e-3)

    @given(seed=st.integers(0, 5000))
    @settings(max_examples=30)
    def test_fused_value_within_prediction_range(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 7))
        slc = EnsembleSlice(preds=rng.uniform(-3, 3, n),
                            confs=rng.uniform(0.01, 1.0, n))
        lo, hi = slc.preds.min(), slc.preds.max()
        for scheme in ("mean", "wmean", "maxconf"):
            assert lo <= fuse_deterministic(slc, scheme) <= hi
        assert lo - 1e-9 <= fuse_mle(slc) <= hi + 1e-9

    def test_invalid_v2(self):
        with pytest.raises(FusionError):
            fuse_mle(EnsembleSlice(preds=[1.0], confs=[1.0]), v2=0.0)


class TestFuseMaps:
    def test_matches_per_pixel_schemes(self, rng):
        preds = rng.uniform(0, 5, (3, 4, 6))
        confs = rng.uniform(0.05, 1.0, (3, 4, 6))
        for scheme in ("mean", "wmean", "maxconf", "mle"):
            fused = fuse_maps(preds, confs, scheme)
            for i in range(4):
                for j in range(6):
                    slc = EnsembleSlice(preds=preds[:, i, j], confs=confs[:, i, j])
                    if scheme == "mle":
                        expect = fuse_mle(slc)
                        assert fused[i, j] == pytest.approx(expect, abs=1e-5)
                    else:
                        expect = fuse_deterministic(slc, scheme)
                        assert fused[i, j] == pytest.approx(expect, rel=1e-12)

    def test_identical_members_fuse_to_themselves(self, rng):
        pred = rng.uniform(0, 5, (4, 4))
        conf = rng.uniform(0.1, 1.0, (4, 4))
        preds = np.stack([pred, pred])
        confs = np.stack([conf, conf])
        for scheme in ("mean", "wmean", "maxconf"):
            np.testing.assert_allclose(fuse_maps(preds, confs, scheme), pred,
                                       rtol=1e-15)
        np.testing.assert_allclose(fuse_maps(preds, confs, "mle"), pred, atol=1e-9)

    def test_shape_validation(self):
        with pytest.raises(FusionError):
            fuse_maps(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)), "mean")
