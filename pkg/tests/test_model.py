import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from mudra.data import Dataset, Sample
from mudra.datagen import MissingnessPolicy, SynthConfig, apply_missingness, generate_synthetic
from mudra.errors import EmptyClass, ValidationError
from mudra.model import (
    EcmState,
    FitConfig,
    FittedModel,
    ModelParams,
    class_priors,
    cm_step,
    e_step,
    expected_residual_sq,
    fit,
    init_params,
    log_likelihood,
)
from mudra.splines import build_basis, spline_matrix

from conftest import dense_cov, random_params, random_sample


@pytest.fixture(scope="module")
def small_data():
    ds, truth = generate_synthetic(SynthConfig(K=3, F=2, T=8, m=15, seed=4))
    ds = apply_missingness(ds, MissingnessPolicy(time_keep_range=(3, 7)), rng=5)
    return ds, truth


CFG = FitConfig(max_outer_iters=15, domain=(1.0, 8.0))


class TestLikelihood:
    def test_scalar_case(self):
        # one time, one feature, Sigma'=Psi'=1 via a single-function basis evaluation
        params = random_params(np.random.default_rng(0), b=4, n_features=1, r=1, k_classes=1)
        basis = params.basis
        s = spline_matrix(basis, [0.0])  # selects basis function 1 exactly
        sigma_b = np.eye(4)
        params = ModelParams(basis, np.zeros((4, 1)), params.Lambda, params.xi,
                             np.zeros((1, 1, 1)), sigma_b, np.eye(1), 1.0, np.ones(1))
        sample = Sample("x", [0.0], [1], [[0.0]], label=1)
        assert s[0, 0] == 1.0
        ll = log_likelihood(params, Dataset([sample]))
        assert ll == pytest.approx(-0.5 * math.log(2 * math.pi * 2), abs=1e-12)

    def test_matches_dense_gaussian(self, rng):
        params = random_params(rng, b=5, n_features=3, r=2, k_classes=2)
        samples = [random_sample(rng, params, rng.integers(1, 8), rng.integers(1, 4),
                                 label=int(rng.integers(1, 3)), sample_id=str(i))
                   for i in range(6)]
        ref = 0.0
        means = params.class_means()
        for s in samples:
            mu = spline_matrix(params.basis, s.times) @ means[s.label - 1][:, s.features - 1]
            ref += multivariate_normal.logpdf(s.values.ravel(order="F"), mu.ravel(order="F"),
                                              dense_cov(params, s))
        assert log_likelihood(params, Dataset(samples, num_classes=2, feature_count=3)) == \
            pytest.approx(ref, rel=1e-10)


class TestEStep:
    @staticmethod
    def dense(params, sample):
        s = spline_matrix(params.basis, sample.times)
        f = sample.features - 1
        mu = s @ params.class_means()[sample.label - 1][:, f]
        k = np.kron(params.Psi[np.ix_(f, f)], s @ params.Sigma @ s.T)
        x = (sample.values - mu).ravel(order="F")
        out = k @ np.linalg.solve(params.sigma**2 * np.eye(x.size) + k, x)
        return out.reshape(sample.values.shape, order="F")

    def test_matches_dense_oracle(self, rng):
        for _ in range(20):
            params = random_params(rng, b=5, n_features=3, r=2, k_classes=2)
            s = random_sample(rng, params, rng.integers(1, 6), rng.integers(1, 4), label=2)
            ref = self.dense(params, s)
            got = e_step(params, s)
            assert np.linalg.norm(got - ref) <= 1e-8 * max(np.linalg.norm(ref), 1e-12)

    def test_noise_limits(self, rng):
        base = random_params(rng, b=5, n_features=2, r=1, k_classes=1)
        s = random_sample(rng, base, 4, 2, label=1)
        resid = s.values - spline_matrix(base.basis, s.times) @ base.lambda0[:, s.features - 1]
        fields = base.__dict__.copy()
        tiny = ModelParams(**{**fields, "sigma": 1e-8, "alphas": np.zeros((1, 1, 1))})
        huge = ModelParams(**{**fields, "sigma": 1e6, "alphas": np.zeros((1, 1, 1))})
        np.testing.assert_allclose(e_step(tiny, s), resid, atol=1e-6)
        assert np.linalg.norm(e_step(huge, s)) <= 1e-6 * np.linalg.norm(resid)

    def test_expected_residual_matches_monte_carlo(self, rng):
        from mudra.numkernels import sample_matrix_normal

        params = random_params(rng, b=5, n_features=3, r=2, k_classes=2)
        s = random_sample(rng, params, 4, 2, label=2)
        gp = e_step(params, s)
        sm = spline_matrix(params.basis, s.times)
        f = s.features - 1
        resid = s.values - sm @ params.class_means()[1][:, f]
        draws = sample_matrix_normal(gp, sm @ params.Sigma @ sm.T, params.Psi[np.ix_(f, f)],
                                     rng, size=20000)
        vals = np.sum((resid - draws) ** 2, axis=(1, 2))
        se = vals.std(ddof=1) / np.sqrt(vals.size)
        assert abs(vals.mean() - expected_residual_sq(params, s, gp)) <= 3 * se

    def test_unlabeled_rejected(self, rng):
        params = random_params(rng)
        with pytest.raises(ValidationError):
            e_step(params, random_sample(rng, params, 3, 2, label=None))


class TestInit:
    def test_constraints_and_shapes(self, small_data):
        ds, _ = small_data
        p = init_params(ds, 6, 2, rng=0)
        np.testing.assert_allclose(p.Lambda.T @ p.Lambda, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(p.xi @ p.xi.T, np.eye(2), atol=1e-12)
        np.testing.assert_allclose(ds.class_sizes @ p.alphas.reshape(3, -1), 0, atol=1e-12)
        assert p.sigma == 1.0
        assert not p.lambda0.any()

    def test_rank_above_basis(self, small_data):
        with pytest.raises(ValidationError):
            init_params(small_data[0], 5, 6)

    def test_priors(self):
        np.testing.assert_allclose(class_priors([1, 3], "empirical"), [0.25, 0.75])
        np.testing.assert_allclose(class_priors([1, 3]), [0.5, 0.5])
        with pytest.raises(ValidationError):
            class_priors([1], "flat")


class TestCMStep:
    def test_single_class_collapses(self, small_data):
        ds, _ = small_data
        one = Dataset([s.with_label(1) for s in ds], num_classes=1, feature_count=2)
        p = init_params(one, build_basis(6, 1, 8), 1, rng=0)
        gps = [e_step(p, s) for s in one]
        out = cm_step(EcmState(p, gamma_primes=gps), one)
        np.testing.assert_allclose(out.betas[0], out.params.lambda0, atol=1e-10)
        assert np.abs(out.beta_primes).max() < 1e-10

    def test_noiseless_square_design_recovers_coefficients(self, rng):
        # T = b times and all features: S and C invertible, so beta is exact
        b, n_feat = 4, 2
        basis = build_basis(b, 0, 1)
        times = np.linspace(0, 1, b)
        s = spline_matrix(basis, times)
        true = rng.standard_normal((2, b, n_feat))
        samples = [Sample(f"{k}{j}", times, [1, 2], s @ true[k], label=k + 1)
                   for k in range(2) for j in range(3)]
        ds = Dataset(samples)
        p = init_params(ds, basis, 1, rng=1)
        gps = [np.zeros((b, n_feat)) for _ in samples]
        out = cm_step(EcmState(p, gamma_primes=gps), ds)
        np.testing.assert_allclose(out.betas, true, atol=1e-6)
        np.testing.assert_allclose(out.params.lambda0, true.mean(axis=0), atol=1e-6)

    def test_zero_posterior_means(self, rng):
        # gamma-hat = 0 leaves the covariance updates at their jitter guard
        b, n_feat = 5, 2
        basis = build_basis(b, 0, 1)
        samples = [Sample(str(j), np.sort(rng.choice(np.linspace(0, 1, 9), 4, replace=False)),
                          [1, 2], rng.standard_normal((4, 2)), label=j % 2 + 1) for j in range(8)]
        ds = Dataset(samples)
        p = init_params(ds, basis, 1, rng=0)
        out = cm_step(EcmState(p, gamma_primes=[np.zeros((4, 2))] * 8), ds)
        assert not out.gammas.any()
        np.testing.assert_allclose(out.params.Sigma, np.eye(b), atol=1e-12)
        assert np.abs(out.params.Psi).max() <= 1e-7
        means = out.params.class_means()
        mse = np.mean([np.mean((s.values - spline_matrix(basis, s.times)
                                @ means[s.label - 1]) ** 2) for s in samples])
        assert out.params.sigma**2 == pytest.approx(mse, rel=1e-6)

    def test_centering_and_orthonormality(self, small_data):
        ds, _ = small_data
        p = init_params(ds, build_basis(6, 1, 8), 2, rng=3)
        out = cm_step(EcmState(p, gamma_primes=[e_step(p, s) for s in ds]), ds)
        sizes = ds.class_sizes
        scale = np.abs(out.beta_primes).max() * sizes.sum()
        assert np.abs(np.einsum("k,kbf->bf", sizes, out.beta_primes)).max() <= 1e-12 * scale
        np.testing.assert_allclose(out.params.Lambda.T @ out.params.Lambda, np.eye(2), atol=1e-10)
        np.testing.assert_allclose(out.params.xi @ out.params.xi.T, np.eye(2), atol=1e-10)
        np.testing.assert_allclose(np.trace(out.params.Sigma), 6, rtol=1e-12)
        assert out.params.sigma > 0
        # sigma^2 is the mean expected residual under the final covariances
        total = sum(expected_residual_sq(out.params, s, gp) for s, gp in zip(ds, out.gamma_primes))
        tf = sum(s.n_times * s.n_features for s in ds)
        assert out.params.sigma**2 == pytest.approx(total / tf, rel=1e-10)


class TestFit:
    def test_accepted_trace_strictly_increases(self, small_data):
        m = fit(small_data[0], 6, 2, CFG, rng=0)
        q = np.asarray(m.diagnostics.Q_trace)
        assert q.size >= 2
        assert np.all(np.diff(q) > 0)
        assert m.diagnostics.final_Q == q[-1]
        assert m.diagnostics.reason
        assert len(m.gamma_primes) == len(small_data[0])

    def test_restart_at_stopping_point_rejects_first_candidate(self, small_data):
        ds = small_data[0]
        cfg = FitConfig(max_outer_iters=100, domain=(1.0, 8.0))
        first = fit(ds, 6, 2, cfg, rng=0)
        assert first.diagnostics.reason == "likelihood did not increase"
        again = fit(ds, 6, 2, cfg, init=first.params)
        assert again.diagnostics.iterations == 1
        assert len(again.diagnostics.Q_trace) == 1
        assert again.diagnostics.rejected_Q <= again.diagnostics.final_Q
        assert again.params is first.params
        assert again.gamma_primes is None

    def test_exact_mean_data_recovers_intercept(self, rng):
        # samples equal S lambda0* C: one step from lambda0* keeps it exactly and
        # shrinks sigma, which raises the likelihood, so the step is accepted
        b = 5
        basis = build_basis(b, 0, 1)
        lam0 = rng.standard_normal((b, 2))
        samples = []
        for j in range(12):
            t = np.sort(rng.choice(np.linspace(0, 1, 11), 5, replace=False))
            feats = [1, 2] if j % 3 else [j % 2 + 1]
            y = spline_matrix(basis, t) @ lam0[:, np.array(feats) - 1]
            samples.append(Sample(str(j), t, feats, y, label=j % 2 + 1))
        ds = Dataset(samples)
        init = ModelParams(**{**init_params(ds, basis, 1, rng=0).__dict__, "lambda0": lam0,
                              "alphas": np.zeros((2, 1, 1))})
        m = fit(ds, b, 1, FitConfig(max_outer_iters=1), init=init)
        assert len(m.diagnostics.Q_trace) == 2
        np.testing.assert_allclose(m.params.lambda0, lam0, atol=1e-8)
        assert m.params.sigma < 1e-6

    def test_initial_likelihood_recorded(self, small_data):
        ds = small_data[0]
        p = init_params(ds, build_basis(6, 1, 8), 2, rng=0)
        m = fit(ds, 6, 2, FitConfig(max_outer_iters=1), init=p)
        assert m.diagnostics.Q_trace[0] == pytest.approx(log_likelihood(p, ds))

    def test_single_feature(self):
        ds = generate_synthetic(SynthConfig(K=2, F=1, T=8, m=10, seed=2))[0]
        m = fit(ds, 5, 1, CFG, rng=0)
        assert np.all(np.diff(m.diagnostics.Q_trace) > 0)
        assert m.params.xi.shape == (1, 1)
        assert abs(abs(m.params.xi[0, 0]) - 1) < 1e-12

    def test_serialization_round_trip(self, small_data, tmp_path):
        m = fit(small_data[0], 6, 2, FitConfig(max_outer_iters=3, domain=(1.0, 8.0)), rng=0)
        path = tmp_path / "m.json"
        m.save(path)
        back = FittedModel.load(path)
        for name in ("lambda0", "Lambda", "xi", "alphas", "Sigma", "Psi", "priors"):
            np.testing.assert_array_equal(getattr(back.params, name), getattr(m.params, name))
        assert back.params.sigma == m.params.sigma
        assert back.params.basis == m.params.basis
        assert log_likelihood(back.params, small_data[0]) == log_likelihood(m.params, small_data[0])

    def test_sample_order_invariance(self, small_data):
        ds = small_data[0]
        cfg = FitConfig(max_outer_iters=3, domain=(1.0, 8.0))
        a = fit(ds, 6, 2, cfg, rng=0)
        b = fit(ds.replace_samples(ds.samples[::-1]), 6, 2, cfg, rng=0)
        np.testing.assert_allclose(a.params.class_means(), b.params.class_means(), atol=1e-8)

    def test_thread_count_does_not_change_result(self, small_data):
        ds = small_data[0]
        a = fit(ds, 6, 2, FitConfig(max_outer_iters=3, domain=(1.0, 8.0)), rng=0)
        b = fit(ds, 6, 2, FitConfig(max_outer_iters=3, domain=(1.0, 8.0), n_jobs=3), rng=0)
        np.testing.assert_array_equal(a.params.class_means(), b.params.class_means())

    def test_input_validation(self, small_data):
        ds = small_data[0]
        with pytest.raises(ValidationError):
            fit(ds, 3, 1)
        with pytest.raises(ValidationError):
            fit(ds, 6, 7)
        with pytest.raises(EmptyClass):
            fit(Dataset([s for s in ds if s.label != 2], num_classes=3), 6, 1)
