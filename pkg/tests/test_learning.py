import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fbst.errors import InfeasibleTransformError, ShapeError
from fbst.filterbank import FilterBankTransform, analyze, gram_eigenvalues, magnitude_responses
from fbst.imaging import build_patch_matrix
from fbst.lbfgs import LBFGSParams, lbfgs_minimize
from fbst.learning import (
    LearnConfig,
    TrainingSet,
    dct_basis,
    hard_threshold,
    image_cross,
    image_gram,
    init_transform,
    j1_value_grad,
    j2_value_grad,
    learn,
    objective_and_grad,
    precompute_moments,
    sample_patches,
    scale_nu_for_size,
    sparse_code,
)


def brute_force_l0(t, nu):
    """Minimizer of 1/2 ||t - z||^2 + (nu^2/2) ||z||_0 by enumerating supports.

    Costs are compared in exact rational arithmetic; ties go to the sparser
    support.
    """
    tf = [Fraction(float(v)) for v in t]
    pen = Fraction(float(nu)) ** 2 / 2
    best, best_mask = None, None
    for mask in itertools.product([False, True], repeat=len(tf)):
        val = sum(v * v / 2 for v, m in zip(tf, mask) if not m) + pen * sum(mask)
        if best is None or val < best or (val == best and sum(mask) < sum(best_mask)):
            best, best_mask = val, mask
    return np.where(best_mask, t, 0.0)


def fd_grad(fun, W, h=1e-6):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        E = np.zeros_like(W)
        E[idx] = h
        g[idx] = (fun(W + E) - fun(W - E)) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestHardThreshold:
    def test_rule(self):
        np.testing.assert_array_equal(hard_threshold([0.5, -0.05, 0.2], 0.1), [0.5, 0, 0.2])

    def test_zero_threshold_keeps_everything(self):
        t = np.array([0.0, 1e-300, -2.0])
        np.testing.assert_array_equal(hard_threshold(t, 0.0), t)

    def test_tie_goes_to_zero(self):
        np.testing.assert_array_equal(hard_threshold([0.25, -0.25], 0.25), [0.0, 0.0])

    @given(st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=8),
           st.floats(0, 2, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_matches_brute_force(self, t, nu):
        t = np.array(t)
        np.testing.assert_array_equal(hard_threshold(t, nu), brute_force_l0(t, nu))

    def test_shape_preserved(self):
        assert hard_threshold(np.ones((2, 3, 4)), 0.5).shape == (2, 3, 4)


class TestSparseCode:
    def test_large_threshold_all_zero(self):
        rng = np.random.default_rng(0)
        H = FilterBankTransform(rng.standard_normal((3, 4)))
        x = rng.standard_normal((6, 6))
        nu = np.abs(analyze(H, x)).max() + 1
        assert not np.any(sparse_code(H, x, nu))

    def test_zero_threshold_is_analysis(self):
        rng = np.random.default_rng(1)
        H = FilterBankTransform(rng.standard_normal((3, 4)))
        x = rng.standard_normal((6, 6))
        np.testing.assert_array_equal(sparse_code(H, x, 0.0), analyze(H, x))


class TestMoments:
    def test_single_column(self):
        x0 = np.array([[1.0], [2.0], [3.0]])
        m = precompute_moments(x0, np.array([[1.0], [0.0]]))
        np.testing.assert_array_equal(m.G, x0 @ x0.T)

    def test_trace_identity(self):
        rng = np.random.default_rng(2)
        W, X, Z = rng.standard_normal((3, 4)), rng.standard_normal((4, 10)), rng.standard_normal((3, 10))
        m = precompute_moments(X, Z)
        direct = np.sum((W @ X - Z) ** 2)
        trace = np.trace(W.T @ W @ m.G) - 2 * np.trace(W @ m.Y) + m.zsq
        assert trace == pytest.approx(direct, rel=1e-10)

    def test_exact_codes_give_zero_residual(self):
        rng = np.random.default_rng(3)
        W, X = rng.standard_normal((3, 4)), rng.standard_normal((4, 10))
        b, g = objective_and_grad(W, precompute_moments(X, W @ X), 0.0, 0.0, 8)
        assert abs(b.f) < 1e-10 * np.sum((W @ X) ** 2)
        np.testing.assert_allclose(g, 0.0, atol=1e-10)

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            precompute_moments(np.zeros((4, 3)), np.zeros((2, 5)))

    @pytest.mark.parametrize("shape,K", [((8, 8), 3), ((6, 9), 2), ((5, 5), 4)])
    def test_fft_moments_match_patch_matrix(self, shape, K):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(shape)
        H = FilterBankTransform(rng.standard_normal((3, K * K)))
        Zs = hard_threshold(analyze(H, x), 0.3)
        X = build_patch_matrix(x, K, 1)
        Z = Zs.reshape(3, -1)
        np.testing.assert_allclose(image_gram(x, K), X @ X.T, atol=1e-10)
        np.testing.assert_allclose(image_cross(x, Zs, K), X @ Z.T, atol=1e-10)

    def test_sample_patches_are_patch_columns(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((7, 9))
        P = sample_patches([x], 3, 50, seed=1)
        cols = {tuple(np.round(c, 12)) for c in build_patch_matrix(x, 3, 1).T}
        assert all(tuple(np.round(c, 12)) in cols for c in P.T)
        np.testing.assert_array_equal(P, sample_patches([x], 3, 50, seed=1))


class TestJ1:
    @pytest.mark.parametrize("c,N", [(1.0, 4), (2.5, 5), (0.3, 8)])
    def test_single_delta_closed_form(self, c, N):
        W = np.zeros((1, 4))
        W[0, 0] = c
        value, _ = j1_value_grad(W, N)
        expected = 0.5 * c**2 - N**2 * math.log(c**2 / N**2) - math.log(c**2)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(6)
        for _ in range(5):
            W = rng.standard_normal((4, 9))
            _, g = j1_value_grad(W, 8)
            assert rel_err(g, fd_grad(lambda V: j1_value_grad(V, 8)[0], W)) < 1e-5

    def test_zero_row_is_infeasible(self):
        W = np.random.default_rng(7).standard_normal((3, 9))
        W[1] = 0
        assert j1_value_grad(W, 12)[0] == math.inf

    def test_common_zero_is_infeasible(self):
        W = np.random.default_rng(8).standard_normal((3, 9))
        W -= W.mean(axis=1, keepdims=True)
        assert j1_value_grad(W, 12)[0] == math.inf


class TestJ2:
    def test_shifted_copies_are_infeasible(self):
        h = np.zeros((3, 3))
        h[0, :2] = [1.0, 0.5]
        W = np.stack([h.ravel(), np.roll(h, 1, axis=0).ravel()])
        assert j2_value_grad(W, 12)[0] == math.inf

    def test_disjoint_magnitude_responses(self):
        # with N_F = K = 2 the box filter and the checkerboard [[1,-1],[-1,1]]
        # respond on different DFT bins
        W = np.array([[1.0, 1.0, 1.0, 1.0], [1.0, -1.0, -1.0, 1.0]])
        value, _ = j2_value_grad(W, 2)
        assert value == pytest.approx(0.0, abs=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(9)
        for _ in range(5):
            W = rng.standard_normal((4, 9))
            _, g = j2_value_grad(W, 12)
            assert rel_err(g, fd_grad(lambda V: j2_value_grad(V, 12)[0], W)) < 1e-5

    def test_single_channel_is_zero(self):
        value, g = j2_value_grad(np.ones((1, 4)), 8)
        assert value == 0.0 and not np.any(g)


class TestObjective:
    def test_total_gradient(self):
        rng = np.random.default_rng(10)
        X = rng.standard_normal((9, 20))
        for _ in range(5):
            W = rng.standard_normal((4, 9))
            m = precompute_moments(X, hard_threshold(W @ X, 0.5))
            b, g = objective_and_grad(W, m, 3.0, 7e-4 * 100, 12)
            assert b.total == pytest.approx(b.f + 3.0 * b.j1 + 0.07 * b.j2, rel=1e-12)
            num = fd_grad(lambda V: objective_and_grad(V, m, 3.0, 0.07, 12)[0].total, W)
            assert rel_err(g, num) < 1e-5

    def test_one_lbfgs_step_decreases(self):
        rng = np.random.default_rng(11)
        X = rng.standard_normal((9, 30))
        W = init_transform(3, 4, seed=2, fft_size=12).W
        m = precompute_moments(X, hard_threshold(W @ X, 0.5))
        fun = lambda V: (lambda b, g: (b.total, g))(*objective_and_grad(V, m, 1.0, 1e-3, 12))
        res = lbfgs_minimize(fun, W, LBFGSParams(max_iterations=1))
        assert res.value < fun(W)[0]

    def test_infeasible_sentinel(self):
        W = np.zeros((2, 4))
        assert objective_and_grad(W, None, 1.0, 0.0, 8)[0].total == math.inf


class TestInit:
    def test_dct_full_bank_is_tight(self):
        H = init_transform(4, 16, "dct")
        np.testing.assert_allclose(H.W @ H.W.T, np.eye(16), atol=1e-12)
        lam = gram_eigenvalues(H, H.fft_size)
        assert lam.max() / lam.min() == pytest.approx(1.0, abs=1e-10)

    def test_dct_basis_order(self):
        B = dct_basis(3)
        np.testing.assert_allclose(B[0], 1 / 3)
        assert B.shape == (9, 9)

    def test_dct_extra_channels_are_gaussian(self):
        H = init_transform(2, 6, "dct", seed=0)
        np.testing.assert_allclose(H.W[:4], dct_basis(2))
        assert H.num_channels == 6

    def test_gaussian_deterministic(self):
        a = init_transform(4, 8, seed=3)
        b = init_transform(4, 8, seed=3)
        assert a.W.tobytes() == b.W.tobytes()
        assert not np.array_equal(a.W, init_transform(4, 8, seed=4).W)

    def test_gaussian_single_channel_feasible(self):
        H = init_transform(8, 1, seed=0)
        assert gram_eigenvalues(H, 32).min() > 0

    def test_gaussian_scale(self):
        H = init_transform(8, 64, seed=0)
        assert np.std(H.W) == pytest.approx(1 / 8, rel=0.05)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            init_transform(3, 3, "haar")


class TestPropTwo:
    @pytest.mark.parametrize("seed", range(3))
    def test_j1_stationary_point(self, seed):
        nc, K, nf = 8, 4, 16
        H = init_transform(K, nc, seed=seed, fft_size=nf, check_coherence=False)
        res = lbfgs_minimize(lambda W: j1_value_grad(W, nf), H.W,
                             LBFGSParams(max_iterations=2000, gradient_tolerance=1e-6))
        n2 = np.sum(res.x**2, axis=1)
        lam = magnitude_responses(res.x, nf)[1].sum(axis=0)
        np.testing.assert_allclose(n2, 2 * (1 + nf**2 / nc), rtol=1e-3)
        np.testing.assert_allclose(lam, 2 * (1 + nc / nf**2), rtol=1e-3)


class TestConfig:
    def test_defaults(self):
        c = LearnConfig(filter_size=8)
        assert (c.mu, c.lam, c.nu, c.outer_iterations, c.n_fft) == (3.0, 7e-4, 5.5e-3, 1000, 32)

    @pytest.mark.parametrize("kw", [dict(mu=-1.0), dict(nu=-1e-3), dict(init="x"),
                                    dict(fft_size=3, filter_size=4), dict(num_channels=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LearnConfig(**kw)

    def test_training_set_requires_one_source(self):
        with pytest.raises(ValueError):
            TrainingSet()
        with pytest.raises(ValueError):
            TrainingSet(images=[np.zeros((4, 4))], patches=np.zeros((4, 2)))
        with pytest.raises(ValueError):
            TrainingSet(images=[])

    def test_nu_scaling(self):
        assert scale_nu_for_size(5.5e-3, 128 * 128) == pytest.approx(0.022)
        assert scale_nu_for_size(1.0, 512 * 512) == 1.0


class TestLearn:
    def _image(self, seed=0, n=32):
        rng = np.random.default_rng(seed)
        x = np.cumsum(np.cumsum(rng.standard_normal((n, n)), 0), 1)
        return x / np.linalg.norm(x)

    def test_trace_monotone(self):
        cfg = LearnConfig(num_channels=8, filter_size=3, nu=0.02, outer_iterations=10, seed=1)
        H, trace = learn(TrainingSet(images=[self._image()]), cfg)
        assert len(trace) == 11
        assert [e.iteration for e in trace] == list(range(11))
        for a, b in zip(trace, trace[1:]):
            assert b.total <= a.total + 1e-9 * abs(a.total)
        for e in trace:
            assert e.total == pytest.approx(e.f + cfg.mu * e.j1 + cfg.lam * e.j2 + e.sparsity,
                                            rel=1e-12)

    def test_exactly_sparsifiable_fixed_point(self):
        cfg = LearnConfig(num_channels=4, filter_size=2, mu=0.0, lam=0.0, nu=0.0,
                          outer_iterations=1)
        H0 = init_transform(2, 4, seed=0)
        H, trace = learn(TrainingSet(images=[self._image(n=8)]), cfg, initial=H0)
        np.testing.assert_array_equal(H.W, H0.W)
        assert trace[1].f == pytest.approx(0.0, abs=1e-12)

    def test_image_and_patch_paths_agree(self):
        x = self._image(2, n=12)
        cfg = LearnConfig(num_channels=4, filter_size=3, nu=0.05, outer_iterations=3, seed=0)
        _, t_img = learn(TrainingSet(images=[x]), cfg)
        _, t_pat = learn(TrainingSet(patches=build_patch_matrix(x, 3, 1)), cfg)
        for a, b in zip(t_img, t_pat):
            assert a.total == pytest.approx(b.total, rel=1e-8)

    def test_multi_image_sums(self):
        a, b = self._image(3, n=10), self._image(4, n=10)
        cfg = LearnConfig(num_channels=4, filter_size=2, outer_iterations=0, nu=0.05)
        _, ta = learn(TrainingSet(images=[a]), cfg)
        _, tb = learn(TrainingSet(images=[b]), cfg)
        _, tab = learn(TrainingSet(images=[a, b]), cfg)
        assert tab[0].f == pytest.approx(ta[0].f + tb[0].f, rel=1e-12)

    def test_callback_and_determinism(self):
        seen = []
        cfg = LearnConfig(num_channels=4, filter_size=3, nu=0.02, outer_iterations=2, seed=5)
        H1, _ = learn(TrainingSet(images=[self._image()]), cfg, callback=lambda e, H: seen.append(e))
        H2, _ = learn(TrainingSet(images=[self._image()]), cfg)
        assert len(seen) == 3
        assert H1.W.tobytes() == H2.W.tobytes()

    def test_mismatched_initial(self):
        cfg = LearnConfig(num_channels=4, filter_size=3, outer_iterations=1)
        with pytest.raises(ShapeError):
            learn(TrainingSet(images=[self._image()]), cfg, initial=init_transform(2, 4))

    def test_infeasible_initial(self):
        W = np.random.default_rng(0).standard_normal((4, 9))
        W -= W.mean(axis=1, keepdims=True)
        cfg = LearnConfig(num_channels=4, filter_size=3, outer_iterations=1)
        with pytest.raises(InfeasibleTransformError):
            learn(TrainingSet(images=[self._image()]), cfg, initial=FilterBankTransform(W))
