"""Bayes-rule classification and whitened ``r x r`` embeddings of new samples."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import CovarianceSingular, MudraError, RankDeficientProjection, ValidationError
from .model import make_design
from .numkernels import PINV_RCOND

log = logging.getLogger(__name__)


@dataclass
class Embedding:
    alpha_hat: np.ndarray  # (r, r)
    sample_id: str
    rank_deficient: bool = False

    @property
    def vector(self):
        return self.alpha_hat.ravel(order="F")


@dataclass
class ClassScores:
    log_posteriors: np.ndarray  # up to a class-independent constant
    predicted: int  # 1-based


@dataclass
class Projection:
    """Everything needed to embed one sample and score it against each class.

    ``x = vec(Y - S lambda0 C)``, ``A = C^T xi^T (x) S Lambda`` and
    ``H = A^T M^-1 A`` with ``M = sigma^2 I + Psi' (x) Sigma'``.
    """

    x: np.ndarray
    A: np.ndarray
    M: np.ndarray
    H: np.ndarray
    H_sqrt: np.ndarray
    H_inv_sqrt: np.ndarray
    alpha_vec: np.ndarray
    rank_deficient: bool


def _sym_power(h, power):
    """``h ** power`` for symmetric PSD ``h``; negative powers act on the range only."""
    evals, evecs = np.linalg.eigh((h + h.T) / 2)
    top = max(evals[-1], 0.0)
    keep = evals > PINV_RCOND * top if top > 0 else np.zeros_like(evals, dtype=bool)
    vals = np.zeros_like(evals)
    vals[keep] = evals[keep] ** power
    out = (evecs * vals) @ evecs.T
    return (out + out.T) / 2, not keep.all()


def _model_params(model):
    return getattr(model, "params", model)


def project(model, sample):
    params = _model_params(model)
    if sample.features.max() > params.feature_count:
        raise ValidationError(
            f"sample {sample.id!r} uses feature {sample.features.max()} but the model has "
            f"{params.feature_count}"
        )
    design = make_design(params.basis, sample)
    s, f = design.S, design.fidx
    x = (design.Y - s @ params.lambda0[:, f]).ravel(order="F")
    a = np.kron(params.xi[:, f].T, s @ params.Lambda)
    m = params.sigma**2 * np.eye(x.size) + np.kron(
        params.Psi[np.ix_(f, f)], s @ params.Sigma @ s.T
    )
    try:
        chol = sla.cho_factor(m)
    except np.linalg.LinAlgError as exc:
        raise CovarianceSingular(f"sample {sample.id!r}: M_Y is not positive definite") from exc
    m_inv_a = sla.cho_solve(chol, a)
    h = a.T @ m_inv_a
    h_sqrt, _ = _sym_power(h, 0.5)
    h_inv_sqrt, deficient = _sym_power(h, -0.5)
    if deficient:
        warnings.warn(
            f"sample {sample.id!r}: singular projection Gram matrix, using pseudo-inverse",
            RankDeficientProjection,
            stacklevel=3,
        )
    alpha_vec = h_inv_sqrt @ (m_inv_a.T @ x)
    return Projection(x, a, m, h, h_sqrt, h_inv_sqrt, alpha_vec, deficient)


def embed(model, sample):
    """Whitened ``r x r`` representation ``alpha_hat`` of one sample.

    Under the model its covariance is the identity whenever the projection
    Gram matrix is nonsingular.
    """
    params = _model_params(model)
    proj = project(model, sample)
    r = params.r
    return Embedding(proj.alpha_vec.reshape((r, r), order="F"), sample.id, proj.rank_deficient)


def class_scores(model, sample):
    params = _model_params(model)
    proj = project(model, sample)
    targets = np.stack([proj.H_sqrt @ a.ravel(order="F") for a in params.alphas])
    dist = np.sum((proj.alpha_vec - targets) ** 2, axis=1)
    with np.errstate(divide="ignore"):
        scores = -0.5 * dist + np.log(params.priors)
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return ClassScores(scores, int(np.argmax(scores)) + 1)


def predict(model, samples) -> list[Optional[int]]:
    """Predicted 1-based labels; samples that fail are logged and yield ``None``."""
    out = []
    for s in samples:
        try:
            out.append(class_scores(model, s).predicted)
        except MudraError as exc:
            log.warning("sample %s could not be classified: %s", s.id, exc)
            out.append(None)
    return out
