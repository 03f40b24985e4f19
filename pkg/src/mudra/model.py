"""Reduced-rank multivariate functional model and its ECM fit.

Each sample ``j`` of class ``i`` is modeled as::

    Y_ij = S_ij (lambda0 + Lambda alpha_i xi + gamma_ij) C_ij + eps_ij

with ``S_ij`` the spline matrix at the sample's times, ``C_ij`` the selector
of its observed features, ``gamma_ij ~ MN(0, Sigma, Psi)`` and
``eps_ij ~ MN(0, sigma^2 I, I)``.  ``Lambda`` (b x r) and ``xi^T`` (F x r)
have orthonormal columns, ``alpha_i`` are diagonal and weighted-sum to zero.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg as sla

from . import numkernels as nk
from .data import Dataset
from .errors import (
    CovarianceSingular,
    FlipFlopDivergence,
    NotPositiveDefinite,
    NumericalError,
    ValidationError,
)
from .splines import SplineBasis, build_basis, spline_matrix

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
JITTER = 1e-8


@dataclass(frozen=True)
class ModelParams:
    basis: SplineBasis
    lambda0: np.ndarray  # (b, F)
    Lambda: np.ndarray  # (b, r)
    xi: np.ndarray  # (r, F)
    alphas: np.ndarray  # (K, r, r), diagonal
    Sigma: np.ndarray  # (b, b)
    Psi: np.ndarray  # (F, F)
    sigma: float
    priors: np.ndarray  # (K,)

    @property
    def b(self):
        return self.basis.b

    @property
    def r(self):
        return self.Lambda.shape[1]

    @property
    def num_classes(self):
        return self.alphas.shape[0]

    @property
    def feature_count(self):
        return self.lambda0.shape[1]

    def class_means(self):
        """``(K, b, F)`` stack of ``lambda0 + Lambda alpha_i xi``."""
        return self.lambda0 + np.einsum("br,krs,sf->kbf", self.Lambda, self.alphas, self.xi)

    def to_dict(self):
        return {
            "b": self.b,
            "r": self.r,
            "degree": self.basis.degree,
            "knots": self.basis.knots.tolist(),
            "lambda0": self.lambda0.tolist(),
            "Lambda": self.Lambda.tolist(),
            "xi": self.xi.tolist(),
            "alphas": self.alphas.tolist(),
            "Sigma": self.Sigma.tolist(),
            "Psi": self.Psi.tolist(),
            "sigma": float(self.sigma),
            "priors": self.priors.tolist(),
            "feature_count": self.feature_count,
        }

    @classmethod
    def from_dict(cls, d):
        knots = np.asarray(d["knots"], dtype=float)
        knots.setflags(write=False)
        basis = SplineBasis(knots=knots, degree=int(d["degree"]))
        params = cls(
            basis=basis,
            lambda0=np.asarray(d["lambda0"], dtype=float),
            Lambda=np.asarray(d["Lambda"], dtype=float),
            xi=np.asarray(d["xi"], dtype=float),
            alphas=np.asarray(d["alphas"], dtype=float),
            Sigma=np.asarray(d["Sigma"], dtype=float),
            Psi=np.asarray(d["Psi"], dtype=float),
            sigma=float(d["sigma"]),
            priors=np.asarray(d["priors"], dtype=float),
        )
        if params.b != int(d["b"]) or params.r != int(d["r"]):
            raise ValidationError("model file: b/r disagree with stored matrices")
        if params.feature_count != int(d["feature_count"]):
            raise ValidationError("model file: feature_count disagrees with lambda0")
        return params


@dataclass
class FitConfig:
    """Knobs for :func:`fit`.

    ``tol`` adds a relative-improvement stop on top of the strict
    "stop when the likelihood does not increase" rule; ``0`` disables it.
    """

    max_outer_iters: int = 100
    tol: float = 0.0
    prior: str = "uniform"
    flipflop_max_iters: int = 50
    flipflop_tol: float = 1e-5
    n_jobs: int = 1
    domain: Optional[tuple] = None


@dataclass
class FitDiagnostics:
    iterations: int = 0
    final_Q: float = -math.inf
    reason: str = ""
    Q_trace: list = field(default_factory=list)
    flipflop_iters: list = field(default_factory=list)
    constraints: list = field(default_factory=list)
    rejected_Q: Optional[float] = None


@dataclass
class FittedModel:
    """Fitted parameters with their diagnostics.

    ``gamma_primes`` holds the per-sample posterior means that produced the
    last accepted parameters (training order); they are not serialized.
    """

    params: ModelParams
    diagnostics: Optional[FitDiagnostics] = None
    gamma_primes: Optional[list] = None

    def to_json(self):
        return json.dumps(self.params.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls(ModelParams.from_dict(json.loads(text)))

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path):
        try:
            return cls.from_json(Path(path).read_text())
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: malformed model file ({exc})") from exc


@dataclass
class SampleDesign:
    """Per-sample matrices that stay fixed during a fit."""

    S: np.ndarray  # (T, b)
    fidx: np.ndarray  # 0-based observed feature columns
    Y: np.ndarray  # (T, F_j)
    cls: int  # 0-based class index, -1 if unlabeled

    @property
    def shape(self):
        return self.Y.shape


def make_design(basis, sample):
    cls = -1 if sample.label is None else sample.label - 1
    return SampleDesign(spline_matrix(basis, sample.times), sample.features - 1, sample.values, cls)


@dataclass
class EcmState:
    params: ModelParams
    gamma_primes: list = field(default_factory=list)
    gammas: Optional[np.ndarray] = None
    betas: Optional[np.ndarray] = None
    beta_primes: Optional[np.ndarray] = None
    Q_trace: list = field(default_factory=list)
    flipflop_iters: int = 0
    cp: Optional[nk.CPFactors] = None


def _stabilized(m):
    """Symmetrize; if not safely positive definite, lift the spectrum once.

    The shift cancels any rounding-level negative eigenvalue and adds
    ``1e-8 * mean diagonal``.
    """
    m = (m + m.T) / 2
    evals = np.linalg.eigvalsh(m)
    if evals[-1] > 0 and evals[0] > 1e-10 * evals[-1]:
        return m
    scale = np.trace(m) / m.shape[0]
    shift = max(-evals[0], 0.0) + JITTER * (scale if scale > 0 else 1.0)
    return m + shift * np.eye(m.shape[0])


def _residual(design, mean):
    return design.Y - design.S @ mean[:, design.fidx]


def _require_class(design):
    if design.cls < 0:
        raise ValidationError("this operation needs labeled samples")


# -- likelihood --------------------------------------------------------------


def sample_log_density(params, design, mean):
    """Gaussian log-density of one sample under the marginal model.

    The covariance ``sigma^2 I + Psi' (x) Sigma'`` is diagonalized through the
    eigendecompositions of its two small factors.
    """
    r = _residual(design, mean)
    s = design.S
    a, u = np.linalg.eigh(s @ params.Sigma @ s.T)
    c, v = np.linalg.eigh(params.Psi[np.ix_(design.fidx, design.fidx)])
    lam = params.sigma**2 + np.outer(np.clip(a, 0, None), np.clip(c, 0, None))
    if lam.min() <= 1e-300 or lam.min() <= 1e-15 * lam.max():
        raise CovarianceSingular(f"per-sample covariance is singular (min eigenvalue {lam.min():.3e})")
    rt = u.T @ r @ v
    t, f = r.shape
    return -0.5 * (np.sum(rt**2 / lam) + np.sum(np.log(lam)) + t * f * LOG_2PI)


def log_likelihood(params, dataset, *, designs=None):
    """Joint log-likelihood of a labeled dataset (constants included)."""
    if designs is None:
        designs = [make_design(params.basis, s) for s in dataset]
    means = params.class_means()
    total = 0.0
    for d in designs:
        _require_class(d)
        total += sample_log_density(params, d, means[d.cls])
    return total


# -- E-step ------------------------------------------------------------------


def _e_step(params, design, mean):
    # With K = Psi' (x) Sigma', the posterior mean is K (sigma^2 I + K)^-1 vec(R).
    # Writing it as R - sigma^2 W with Sigma' W + W sigma^2 Psi'^-1 = R Psi'^-1
    # only inverts the small feature block, so Sigma' may be singular (T > b).
    r = _residual(design, mean)
    s = design.S
    sig_p = s @ params.Sigma @ s.T
    sig_p = (sig_p + sig_p.T) / 2
    psi_p = _stabilized(params.Psi[np.ix_(design.fidx, design.fidx)])
    try:
        chol = sla.cho_factor(psi_p)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite("feature covariance block is not positive definite") from exc
    psi_inv = sla.cho_solve(chol, np.eye(psi_p.shape[0]))
    psi_inv = (psi_inv + psi_inv.T) / 2
    w = nk.solve_sylvester(sig_p, params.sigma**2 * psi_inv, r @ psi_inv)
    return r - params.sigma**2 * w


def e_step(params, sample):
    """Posterior mean ``E[S gamma C | Y]`` for one labeled sample (``T x F_j``)."""
    design = make_design(params.basis, sample)
    _require_class(design)
    return _e_step(params, design, params.class_means()[design.cls])


def expected_residual_sq(params, sample, gamma_prime):
    """Expected squared residual of one sample around its posterior mean.

    ``||Y - S mu_i C - gamma'||_F^2 + tr(Psi') tr(Sigma')``, the per-sample
    term whose sum over samples divided by ``sum T F`` gives the sigma^2
    update.
    """
    design = make_design(params.basis, sample)
    _require_class(design)
    r = _residual(design, params.class_means()[design.cls]) - gamma_prime
    s = design.S
    return float(np.sum(r**2) + np.trace(s @ params.Sigma @ s.T)
                 * np.trace(params.Psi[np.ix_(design.fidx, design.fidx)]))


# -- CM-step -----------------------------------------------------------------


def _solve_betas(designs, gamma_primes, b, n_features, n_classes):
    betas = np.zeros((n_classes, b, n_features))
    for k in range(n_classes):
        groups = {}
        rhs = np.zeros((b, n_features))
        for d, gp in zip(designs, gamma_primes):
            if d.cls != k:
                continue
            key = tuple(d.fidx.tolist())
            groups[key] = groups.get(key, 0.0) + d.S.T @ d.S
            rhs[:, d.fidx] += d.S.T @ (d.Y - gp)
        # C C^T is the 0/1 mask of observed features, so samples sharing a
        # feature set collapse into one term
        terms = []
        for key, sts in groups.items():
            mask = np.zeros((n_features, n_features))
            mask[list(key), list(key)] = 1.0
            terms.append((sts, mask))
        betas[k] = nk.solve_gen_matrix_eq(terms, rhs)
    return betas


def _decompose_betas(beta_primes, r):
    """Split centered class coefficients into ``Lambda``, ``xi`` and diagonal alphas."""
    n_classes, b, n_features = beta_primes.shape
    tensor = np.transpose(beta_primes, (1, 2, 0))
    if r <= min(b, n_features):
        cp = nk.cp_decompose_orthogonal(tensor, r)
    else:
        # xi (r x F) cannot have orthonormal rows; fall back to unit-norm CP
        cp = nk.cp_decompose(tensor, r)
    lam = cp.factor_a
    xi = cp.factor_b.T
    alphas = np.zeros((n_classes, r, r))
    idx = np.arange(r)
    alphas[:, idx, idx] = cp.weights * cp.factor_c
    return lam, xi, alphas, cp


def _flip_flop(gammas, gram, masks, n_times, resid_sq, config):
    """Alternate the Sigma / Psi updates together with sigma^2 until sigma settles."""
    n, b, n_features = gammas.shape
    total_f = masks.sum()
    total_t = n_times.sum()
    total_tf = (n_times * masks.sum(axis=1)).sum()

    sigma_b = np.eye(b)
    psi = np.eye(n_features)
    sig = 1.0
    q = 0
    for q in range(1, config.flipflop_max_iters + 1):
        sigma_b = np.einsum("nbf,fg,ncg->bc", gammas, nk.pseudo_inverse(psi), gammas) / total_f
        sigma_b = _stabilized(sigma_b)
        psi = np.einsum("nbf,bc,ncg->fg", gammas, nk.pseudo_inverse(sigma_b), gammas) / total_t
        psi = _stabilized(psi)
        # Psi (x) Sigma is invariant to Sigma -> c Sigma, Psi -> Psi / c; pin trace(Sigma) = b
        scale = np.trace(sigma_b) / b
        sigma_b = sigma_b / scale
        psi = psi * scale

        tr_s = np.einsum("nab,ab->n", gram, sigma_b)
        tr_p = masks @ np.diag(psi)
        sig2 = (resid_sq + np.sum(tr_s * tr_p)) / total_tf
        if not sig2 > 0:
            raise FlipFlopDivergence(f"sigma^2 estimate became {sig2:.3e}")
        new_sig = math.sqrt(sig2)
        done = abs(sig - new_sig) / sig < config.flipflop_tol
        sig = new_sig
        if done:
            break
    return sigma_b, psi, sig, q


def _cm_step(params, designs, gamma_primes, class_sizes, config):
    k_classes = params.num_classes
    b, n_features, r = params.b, params.feature_count, params.r

    betas = _solve_betas(designs, gamma_primes, b, n_features, k_classes)
    weights = class_sizes / class_sizes.sum()
    lambda0 = np.einsum("k,kbf->bf", weights, betas)
    beta_primes = betas - lambda0
    lam, xi, alphas, cp = _decompose_betas(beta_primes, r)

    n = len(designs)
    gammas = np.zeros((n, b, n_features))
    gram = np.empty((n, b, b))
    masks = np.zeros((n, n_features))
    n_times = np.empty(n)
    means = lambda0 + np.einsum("br,krs,sf->kbf", lam, alphas, xi)
    resid_sq = 0.0
    for j, (d, gp) in enumerate(zip(designs, gamma_primes)):
        gammas[j][:, d.fidx] = nk.pseudo_inverse(d.S) @ gp
        gram[j] = d.S.T @ d.S
        masks[j, d.fidx] = 1.0
        n_times[j] = d.S.shape[0]
        resid_sq += np.sum((_residual(d, means[d.cls]) - gp) ** 2)

    sigma_b, psi, sig, ff_iters = _flip_flop(gammas, gram, masks, n_times, resid_sq, config)

    cand = ModelParams(
        basis=params.basis,
        lambda0=lambda0,
        Lambda=lam,
        xi=xi,
        alphas=alphas,
        Sigma=sigma_b,
        Psi=psi,
        sigma=sig,
        priors=params.priors,
    )
    state = EcmState(
        params=cand,
        gamma_primes=gamma_primes,
        gammas=gammas,
        betas=betas,
        beta_primes=beta_primes,
        flipflop_iters=ff_iters,
        cp=cp,
    )
    return state


def cm_step(state, dataset, config=None):
    """Conditional maximization given the E-step output held in ``state``.

    Returns a new :class:`EcmState` whose ``params`` are the candidate
    parameters; acceptance is left to the caller.
    """
    config = config or FitConfig()
    params = state.params
    designs = [make_design(params.basis, s) for s in dataset]
    for d in designs:
        _require_class(d)
    if len(state.gamma_primes) != len(designs):
        raise ValidationError("state must hold one E-step result per sample")
    sizes = np.bincount([d.cls for d in designs], minlength=params.num_classes).astype(float)
    return _cm_step(params, designs, state.gamma_primes, sizes, config)


# -- initialization and outer loop ---------------------------------------------


def _orthonormal(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def class_priors(class_sizes, prior="uniform"):
    class_sizes = np.asarray(class_sizes, dtype=float)
    if prior == "uniform":
        return np.full(class_sizes.size, 1.0 / class_sizes.size)
    if prior == "empirical":
        return class_sizes / class_sizes.sum()
    raise ValidationError(f"unknown prior {prior!r}; expected 'uniform' or 'empirical'")


def init_params(dataset, basis, r, rng=None, prior="uniform"):
    """Random starting point that satisfies the identifiability constraints.

    ``Lambda`` and ``xi^T`` are orthonormalized Gaussian matrices (``xi`` rows
    are only normalized when ``r`` exceeds the feature count), the diagonal
    alphas are small and recentered to a zero class-weighted sum, and
    ``lambda0 = 0``, ``Sigma = I``, ``Psi = I``, ``sigma = 1``.
    """
    if isinstance(basis, (int, np.integer)):
        basis = build_basis(int(basis), *dataset.time_range)
    b = basis.b
    if not 1 <= r <= b:
        raise ValidationError(f"rank must satisfy 1 <= r <= b={b}, got {r}")
    dataset.require_labeled()
    rng = np.random.default_rng(rng)
    n_features = dataset.feature_count
    sizes = dataset.class_sizes.astype(float)
    k_classes = sizes.size

    lam = _orthonormal(rng, b, r)
    if r <= n_features:
        xi = _orthonormal(rng, n_features, r).T
    else:
        xi = rng.standard_normal((r, n_features))
        xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    diag = 0.1 * rng.standard_normal((k_classes, r))
    diag -= sizes @ diag / sizes.sum()
    alphas = np.zeros((k_classes, r, r))
    alphas[:, np.arange(r), np.arange(r)] = diag
    return ModelParams(
        basis=basis,
        lambda0=np.zeros((b, n_features)),
        Lambda=lam,
        xi=xi,
        alphas=alphas,
        Sigma=np.eye(b),
        Psi=np.eye(n_features),
        sigma=1.0,
        priors=class_priors(sizes, prior),
    )


def constraint_report(params, beta_primes, class_sizes):
    r = params.r
    return {
        "LtL": float(np.abs(params.Lambda.T @ params.Lambda - np.eye(r)).max()),
        "xixT": float(np.abs(params.xi @ params.xi.T - np.eye(r)).max()),
        "beta_sum": float(np.abs(np.einsum("k,kbf->bf", class_sizes, beta_primes)).max()),
        "beta_scale": float(np.abs(beta_primes).max(initial=0.0) * class_sizes.sum()),
        "alpha_sum": float(np.abs(np.einsum("k,krs->rs", class_sizes, params.alphas)).max()),
    }


def fit(dataset, b, r, config=None, rng=None, init=None):
    """Fit the model by ECM, accepting a candidate only if the likelihood rises.

    Parameters
    ----------
    dataset : Dataset
        Labeled training samples.
    b : int
        Number of cubic B-spline basis functions (>= 4).
    r : int
        Rank of the class-mean representation, ``1 <= r <= b``.
    config : FitConfig, optional
    rng : numpy Generator or seed, optional
        Drives the random initialization only.
    init : ModelParams, optional
        Starting parameters; overrides the random initialization.

    Returns
    -------
    FittedModel
        Last accepted parameters with their :class:`FitDiagnostics`.
    """
    config = config or FitConfig()
    if not isinstance(dataset, Dataset) or len(dataset) == 0:
        raise ValidationError("fit needs a nonempty Dataset")
    if b < 4:
        raise ValidationError(f"basis size b must be >= 4, got {b}")
    if not 1 <= r <= b:
        raise ValidationError(f"rank must satisfy 1 <= r <= b={b}, got {r}")
    if config.max_outer_iters < 1:
        raise ValidationError("max_outer_iters must be >= 1")
    dataset.require_labeled()

    if init is not None:
        params = init
    else:
        domain = config.domain or dataset.time_range
        basis = build_basis(b, *domain)
        params = init_params(dataset, basis, r, rng, config.prior)

    designs = [make_design(params.basis, s) for s in dataset]
    sizes = dataset.class_sizes.astype(float)
    diag = FitDiagnostics()
    accepted_gps = None
    q_cur = log_likelihood(params, dataset, designs=designs)
    diag.Q_trace.append(q_cur)

    pool = ThreadPoolExecutor(config.n_jobs) if config.n_jobs > 1 else None
    try:
        for k in range(1, config.max_outer_iters + 1):
            diag.iterations = k
            try:
                means = params.class_means()
                job = lambda d: _e_step(params, d, means[d.cls])  # noqa: E731
                gps = list(pool.map(job, designs)) if pool else [job(d) for d in designs]
                state = _cm_step(params, designs, gps, sizes, config)
                q_new = log_likelihood(state.params, dataset, designs=designs)
            except NumericalError as exc:
                raise type(exc)(f"ECM iteration {k}: {exc}") from exc
            diag.flipflop_iters.append(state.flipflop_iters)
            log.debug("iteration %d: Q %.6f -> %.6f", k, q_cur, q_new)

            if not q_new > q_cur:
                diag.rejected_Q = q_new
                diag.reason = "likelihood did not increase"
                break
            gain = q_new - q_cur
            params = state.params
            accepted_gps = gps
            q_cur = q_new
            diag.Q_trace.append(q_cur)
            diag.constraints.append(constraint_report(params, state.beta_primes, sizes))
            if config.tol > 0 and gain <= config.tol * abs(q_cur):
                diag.reason = "relative improvement below tol"
                break
        else:
            diag.reason = "max_outer_iters reached"
    finally:
        if pool:
            pool.shutdown()

    diag.final_Q = diag.Q_trace[-1]
    return FittedModel(params, diag, accepted_gps)
