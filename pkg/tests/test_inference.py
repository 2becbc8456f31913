import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetmogp._linalg import CholeskyError
from hetmogp.dataset import HeterogeneousDataset
from hetmogp.inference import (
    InducingState, LmcModel, elbo, elbo_grad, elbo_upper_guard, init_model, kl_inducing,
    q_f_marginals, spread_subsample,
)
from hetmogp.kernels import RbfKernel, gram
from hetmogp.likelihoods import Bernoulli, HetGaussian, Poisson
from hetmogp.prior import LmcCoefficients, lpf_cross_cov

from _helpers import dense_marginals, fd_gradient, random_data, random_model

D2 = [Bernoulli(), HetGaussian()]
D3 = [Bernoulli(), Poisson(), HetGaussian()]


class TestInducingState:
    def test_positive_definite(self):
        rng = np.random.default_rng(0)
        L_raw = np.tril(rng.normal(0, 3, (2, 4, 4)))
        st_ = InducingState(rng.normal(size=(4, 1)), np.zeros((2, 4)), L_raw)
        for S in st_.S:
            np.testing.assert_allclose(S, S.T)
            assert np.linalg.eigvalsh(S).min() > 0

    def test_from_cholesky_round_trip(self):
        L = np.array([[[2.0, 0.0], [0.3, 0.5]]])
        st_ = InducingState.from_cholesky(np.zeros((2, 1)) + [[0.0], [1.0]], np.zeros((1, 2)), L)
        np.testing.assert_allclose(st_.L, L, rtol=1e-15)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            InducingState(np.zeros((3, 1)), np.zeros((2, 4)), np.zeros((2, 3, 3)))
        with pytest.raises(ValueError):
            InducingState(np.full((2, 1), np.nan), np.zeros((1, 2)), np.zeros((1, 2, 2)))

    def test_model_consistency(self):
        rng = np.random.default_rng(1)
        m = random_model(D2, rng, Q=2)
        with pytest.raises(ValueError):
            LmcModel(tuple(D3), m.coeffs, m.kernels, m.inducing)
        with pytest.raises(ValueError):
            LmcModel(m.likelihoods, m.coeffs, m.kernels[:1], m.inducing)

    def test_param_round_trip(self):
        m = random_model(D3, np.random.default_rng(2), Q=3, M=4, p=2)
        theta = m.get_params()
        m2 = m.with_params(theta)
        np.testing.assert_array_equal(m2.get_params(), theta)
        assert sum(s.stop - s.start for s in m.param_slices().values()) == theta.size


class TestMarginals:
    def test_collapse_on_inducing_inputs(self):
        rng = np.random.default_rng(3)
        Z = np.linspace(0, 1, 5)[:, None]
        k = RbfKernel(1.2, [0.4])
        L = np.tril(rng.normal(0, 0.3, (5, 5)), -1) + np.diag(rng.uniform(0.2, 1, 5))
        mu = rng.normal(size=5)
        model = LmcModel((Poisson(),), LmcCoefficients([[1.0]]), (k,),
                         InducingState.from_cholesky(Z, mu[None], L[None]), jitter=1e-12)
        m, v = q_f_marginals(model, 0, Z)
        np.testing.assert_allclose(m, mu, atol=1e-8)
        np.testing.assert_allclose(v, np.diag(L @ L.T), atol=1e-8)

    def test_prior_variational_gives_prior_variance(self):
        rng = np.random.default_rng(4)
        data = random_data(D3, rng, [10, 8, 6])
        model = init_model(D3, data, 2, 5, rng)
        X = rng.uniform(-1, 1, (7, 1))
        for i in range(model.J):
            _, v = q_f_marginals(model, i, X)
            prior = np.diag(lpf_cross_cov(model.coeffs, model.kernels, i, i, X, X))
            np.testing.assert_allclose(v, prior, rtol=1e-6, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(D2, rng, Q=2, M=3)
        X = rng.uniform(-1, 1, (4, 1))
        for i in range(model.J):
            m, v = q_f_marginals(model, i, X)
            mo, vo = dense_marginals(model, i, X)
            np.testing.assert_allclose(m, mo, rtol=0, atol=1e-10)
            np.testing.assert_allclose(v, vo, rtol=0, atol=1e-10)

    def test_index_and_dimension_errors(self):
        model = random_model(D2, np.random.default_rng(5))
        with pytest.raises(IndexError):
            q_f_marginals(model, 3, np.zeros((2, 1)))
        with pytest.raises(ValueError):
            q_f_marginals(model, 0, np.zeros((2, 2)))

    def test_repeated_inducing_inputs_rescued_by_jitter(self):
        model = random_model(D2, np.random.default_rng(6), Q=2, M=3)
        dup = InducingState(np.full((3, 1), 0.5), model.inducing.mu, model.inducing.L_raw)
        m, v = q_f_marginals(LmcModel(model.likelihoods, model.coeffs, model.kernels, dup),
                             0, np.zeros((2, 1)))
        assert np.all(np.isfinite(m)) and np.all(np.isfinite(v))

    def test_cholesky_failure_names_q(self, monkeypatch):
        import hetmogp.inference as inf
        model = random_model(D2, np.random.default_rng(6), Q=2, M=3)
        bad = model.kernels[1]

        def poisoned(k, X, X2=None):
            K = gram(k, X, X2)
            return K * np.nan if k is bad and X2 is None else K

        monkeypatch.setattr(inf, "gram", poisoned)
        with pytest.raises(CholeskyError, match="q=1"):
            q_f_marginals(model, 0, np.zeros((1, 1)))


class TestKl:
    def test_zero_at_prior(self):
        rng = np.random.default_rng(7)
        data = random_data(D3, rng, [6, 6, 6], p=2)
        model = init_model(D3, data, 3, 6, rng)
        np.testing.assert_allclose(kl_inducing(model), 0.0, atol=1e-9)

    def test_scalar_closed_form(self):
        model = LmcModel((Bernoulli(),), LmcCoefficients([[1.0]]), (RbfKernel(1.0, [1.0]),),
                         InducingState(np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 1, 1))),
                         jitter=1e-14)
        assert abs(kl_inducing(model)[0] - 0.5) < 1e-12

    def test_matches_dense_formula(self):
        rng = np.random.default_rng(8)
        model = random_model(D2, rng, Q=2, M=4)
        for q, k in enumerate(model.kernels):
            K = gram(k, model.inducing.Z) + model.jitter * k.variance * np.eye(4)
            S, mu = model.inducing.S[q], model.inducing.mu[q]
            want = 0.5 * (np.trace(np.linalg.solve(K, S)) + mu @ np.linalg.solve(K, mu) - 4
                          + np.linalg.slogdet(K)[1] - np.linalg.slogdet(S)[1])
            assert abs(kl_inducing(model)[q] - want) < 1e-9 * max(1.0, abs(want))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(1, 5), st.integers(1, 3))
    def test_nonnegative(self, seed, M, Q):
        model = random_model(D2, np.random.default_rng(seed), Q=Q, M=M, spread=2.0)
        assert np.all(kl_inducing(model) >= -1e-9)


class TestElbo:
    def test_no_data(self):
        rng = np.random.default_rng(9)
        model = random_model(D2, rng)
        empty = HeterogeneousDataset(D2, [np.zeros((0, 1))] * 2, [np.zeros(0)] * 2)
        rep = elbo(model, empty)
        assert rep.total == -np.sum(rep.kl_terms)

    def test_report_invariant(self):
        rng = np.random.default_rng(10)
        model = random_model(D3, rng)
        data = random_data(D3, rng, [7, 5, 9])
        rep = elbo(model, data, batch=[[0, 3], None, [1, 2, 8]])
        np.testing.assert_allclose(rep.scale_factors, [3.5, 1.0, 3.0])
        want = np.sum(rep.scale_factors * rep.data_terms) - np.sum(rep.kl_terms)
        assert abs(rep.total - want) < 1e-12 * abs(want)

    def test_full_batch_equals_unbatched(self):
        rng = np.random.default_rng(11)
        model = random_model(D2, rng)
        data = random_data(D2, rng, [5, 7])
        full = elbo(model, data, batch=[np.arange(5), np.arange(7)])
        plain = elbo(model, data)
        np.testing.assert_array_equal(full.scale_factors, [1.0, 1.0])
        assert full.total == plain.total

    def test_duplicated_datum_is_additive(self):
        rng = np.random.default_rng(12)
        model = random_model(D2, rng)
        data = random_data(D2, rng, [5, 4])
        X = [data.X[0], np.vstack([data.X[1], data.X[1][2:3]])]
        Y = [data.Y[0], np.concatenate([data.Y[1], data.Y[1][2:3]])]
        bigger = HeterogeneousDataset(D2, X, Y)
        one = HeterogeneousDataset(D2, [data.X[0][:0], data.X[1][2:3]], [data.Y[0][:0], data.Y[1][2:3]])
        base, dup, single = elbo(model, data), elbo(model, bigger), elbo(model, one)
        assert abs(dup.data_terms[1] - base.data_terms[1] - single.data_terms[1]) < 1e-12
        assert dup.data_terms[0] == base.data_terms[0]

    def test_empty_batch_rejected(self):
        rng = np.random.default_rng(13)
        model = random_model(D2, rng)
        data = random_data(D2, rng, [3, 3])
        with pytest.raises(ValueError):
            elbo(model, data, batch=[[], None])
        with pytest.raises(ValueError):
            elbo(model, data, batch=[[5], None])

    def test_mismatched_likelihoods(self):
        rng = np.random.default_rng(14)
        with pytest.raises(ValueError):
            elbo(random_model(D2, rng), random_data([HetGaussian(), Bernoulli()], rng, [2, 2]))

    @pytest.mark.parametrize("seed", range(5))
    def test_upper_guard(self, seed):
        rng = np.random.default_rng(seed)
        liks = [Bernoulli(), Poisson()]
        model = random_model(liks, rng, spread=3.0)
        data = random_data(liks, rng, [8, 8])
        assert elbo(model, data).total <= elbo_upper_guard(model, data)


class TestElboGrad:
    def test_zero_mean_gradient_at_prior(self):
        rng = np.random.default_rng(15)
        data = random_data(D2, rng, [5, 5])
        model = init_model(D2, data, 2, 4, rng)
        empty = HeterogeneousDataset(D2, [np.zeros((0, 1))] * 2, [np.zeros(0)] * 2)
        _, g = elbo_grad(model, empty)
        np.testing.assert_allclose(g[model.param_slices()["mu"]], 0.0, atol=1e-10)

    @pytest.mark.parametrize("seed", range(3))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = random_model(D2, rng, Q=2, M=3, p=1)
        data = random_data(D2, rng, [6, 6])
        theta = model.get_params()
        _, g = elbo_grad(model, data)
        fd = fd_gradient(lambda t: elbo(model.with_params(t), data).total, theta)
        assert np.all(np.abs(g - fd) <= np.maximum(1e-5, 1e-4 * np.abs(fd)))

    def test_finite_differences_batched(self):
        rng = np.random.default_rng(16)
        model = random_model(D3, rng, Q=2, M=3, p=2)
        data = random_data(D3, rng, [6, 5, 7], p=2)
        batch = [[0, 2, 5], [1, 4], None]
        theta = model.get_params()
        _, g = elbo_grad(model, data, batch)
        fd = fd_gradient(lambda t: elbo(model.with_params(t), data, batch).total, theta)
        assert np.all(np.abs(g - fd) <= np.maximum(1e-5, 1e-4 * np.abs(fd)))

    def test_batch_gradient_is_unbiased(self):
        rng = np.random.default_rng(17)
        model = random_model(D2, rng)
        data = random_data(D2, rng, [4, 4])
        _, full = elbo_grad(model, data)
        subsets = list(itertools.combinations(range(4), 2))
        total = np.zeros_like(full)
        for b1 in subsets:
            for b2 in subsets:
                total += elbo_grad(model, data, [list(b1), list(b2)])[1]
        np.testing.assert_allclose(total / len(subsets) ** 2, full, rtol=0, atol=1e-9)

    def test_report_matches_elbo(self):
        rng = np.random.default_rng(18)
        model = random_model(D3, rng)
        data = random_data(D3, rng, [4, 4, 4])
        assert elbo_grad(model, data)[0].total == elbo(model, data).total


class TestInit:
    def test_prior_start(self):
        rng = np.random.default_rng(19)
        data = random_data(D3, rng, [20, 15, 10], p=2)
        model = init_model(D3, data, 3, 12, rng)
        assert model.Q == 3 and model.M == 12 and model.J == 4
        assert np.all(model.inducing.mu == 0)
        np.testing.assert_allclose(kl_inducing(model), 0.0, atol=1e-9)
        pooled = np.vstack(data.X)
        for k in model.kernels:
            assert k.variance == 1.0
            np.testing.assert_allclose(k.lengthscales, 0.5 * pooled.std(0))
        assert np.isfinite(elbo(model, data).total)

    def test_deterministic(self):
        data = random_data(D2, np.random.default_rng(20), [9, 9])
        a = init_model(D2, data, 2, 5, np.random.default_rng(1))
        b = init_model(D2, data, 2, 5, np.random.default_rng(1))
        np.testing.assert_array_equal(a.get_params(), b.get_params())

    def test_more_inducing_than_data(self):
        rng = np.random.default_rng(21)
        data = random_data(D2, rng, [2, 2])
        model = init_model(D2, data, 1, 7, rng)
        assert model.M == 7

    def test_spread_subsample_distinct(self):
        rng = np.random.default_rng(22)
        X = np.vstack([rng.uniform(size=(200, 1)), np.full((50, 1), 0.3)])
        idx = spread_subsample(X, 20, rng)
        assert len(set(X[idx, 0])) == 20
