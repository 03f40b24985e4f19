import numpy as np
import pytest

from mudra.data import Sample
from mudra.model import ModelParams
from mudra.splines import build_basis


def random_spd(rng, n, ridge=0.5):
    g = rng.standard_normal((n, n))
    return g @ g.T / n + ridge * np.eye(n)


def orthonormal(rng, rows, cols):
    return np.linalg.qr(rng.standard_normal((rows, cols)))[0]


def random_params(rng, b=5, n_features=3, r=2, k_classes=3, t_range=(0.0, 1.0), sigma=None):
    """Model parameters satisfying the orthogonality constraints, with random covariances."""
    basis = build_basis(b, *t_range)
    xi = orthonormal(rng, n_features, r).T if r <= n_features else rng.standard_normal((r, n_features))
    alphas = np.zeros((k_classes, r, r))
    alphas[:, np.arange(r), np.arange(r)] = rng.standard_normal((k_classes, r))
    return ModelParams(
        basis=basis,
        lambda0=rng.standard_normal((b, n_features)),
        Lambda=orthonormal(rng, b, r),
        xi=xi,
        alphas=alphas,
        Sigma=random_spd(rng, b),
        Psi=random_spd(rng, n_features),
        sigma=float(rng.uniform(0.3, 1.5)) if sigma is None else sigma,
        priors=np.full(k_classes, 1.0 / k_classes),
    )


def random_sample(rng, params, n_times, n_feat, label=1, sample_id="s"):
    lo, hi = params.basis.domain
    times = np.sort(rng.choice(np.linspace(lo, hi, 25), size=n_times, replace=False))
    features = np.sort(rng.choice(params.feature_count, size=n_feat, replace=False)) + 1
    values = rng.standard_normal((n_times, n_feat))
    return Sample(sample_id, times, features, values, label=label)


def dense_cov(params, sample):
    """sigma^2 I + Psi' (x) Sigma' built explicitly (test oracle only)."""
    from mudra.splines import spline_matrix

    s = spline_matrix(params.basis, sample.times)
    f = sample.features - 1
    return params.sigma**2 * np.eye(s.shape[0] * f.size) + np.kron(
        params.Psi[np.ix_(f, f)], s @ params.Sigma @ s.T
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
