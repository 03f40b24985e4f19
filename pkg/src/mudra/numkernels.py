"""Structured matrix kernels used by the ECM loop.

Everything here works on small dense ``numpy`` arrays and avoids forming
Kronecker products: Sylvester equations are solved by Schur reduction,
sums of matrix products by a Krylov method whose operator is applied term by
term.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import LinearOperator, gmres

from .errors import (
    DegenerateFactor,
    DimensionMismatch,
    NoConvergence,
    NotPositiveDefinite,
    NotPositiveSemiDefinite,
    SingularEquation,
    ValidationError,
)

PINV_RCOND = 1e-12
SYLVESTER_TOL = 1e-8
KRYLOV_TOL = 1e-8
CP_MAX_SWEEPS = 100


def _as_matrix(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    return a


def solve_sylvester(a, b, c):
    """Solve ``A X + X B = C`` (Bartels-Stewart, via :func:`scipy.linalg.solve_sylvester`).

    The equation is checked for singularity first, since LAPACK's solver
    silently rescales instead of failing.

    Parameters
    ----------
    a : ndarray, shape (m, m)
    b : ndarray, shape (n, n)
    c : ndarray, shape (m, n)

    Returns
    -------
    x : ndarray, shape (m, n)

    Raises
    ------
    SingularEquation
        If an eigenvalue of ``a`` is (numerically) the negative of an
        eigenvalue of ``b``.
    """
    a = _as_matrix(a, "A")
    b = _as_matrix(b, "B")
    c = _as_matrix(c, "C")
    m, n = c.shape
    if a.shape != (m, m) or b.shape != (n, n):
        raise DimensionMismatch(
            f"incompatible shapes A{a.shape}, B{b.shape}, C{c.shape}"
        )

    ea = np.linalg.eigvals(a)
    eb = np.linalg.eigvals(b)
    scale = max(np.abs(ea).max(), np.abs(eb).max(), 1.0)
    if np.abs(np.add.outer(ea, eb)).min() <= 1e-13 * scale:
        raise SingularEquation(
            "A and -B share an eigenvalue; the Sylvester equation is singular"
        )
    return sla.solve_sylvester(a, b, c)


@dataclass
class KrylovInfo:
    iterations: int
    residual: float


def solve_gen_matrix_eq(terms, rhs, *, tol=KRYLOV_TOL, return_info=False):
    """Solve ``sum_j A_j X B_j = RHS`` with unrestarted GMRES.

    The operator is applied as a sum of matrix products, so no Kronecker
    product is ever formed.  The iteration cap is ``p * q``, the dimension of
    the unknown, at which an exact-arithmetic Krylov method must terminate.

    Parameters
    ----------
    terms : sequence of (ndarray (p, p), ndarray (q, q))
    rhs : ndarray, shape (p, q)
    tol : float
        Relative residual target ``||sum A X B - RHS|| / ||RHS||``.
    return_info : bool
        Also return a :class:`KrylovInfo`.

    Raises
    ------
    NoConvergence
        If the residual target is not met within ``p * q`` iterations.
    """
    rhs = _as_matrix(rhs, "RHS")
    p, q = rhs.shape
    terms = [(_as_matrix(a, "A_j"), _as_matrix(b, "B_j")) for a, b in terms]
    if not terms:
        raise ValidationError("term list must be nonempty")
    for a, b in terms:
        if a.shape != (p, p) or b.shape != (q, q):
            raise DimensionMismatch(
                f"term shapes {a.shape}, {b.shape} incompatible with RHS {rhs.shape}"
            )

    n = p * q
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        x = np.zeros((p, q))
        return (x, KrylovInfo(0, 0.0)) if return_info else x

    def apply(xv):
        xm = xv.reshape((p, q), order="F")
        out = np.zeros((p, q))
        for a, b in terms:
            out += a @ xm @ b
        return out.ravel(order="F")

    op = LinearOperator((n, n), matvec=apply, dtype=float)
    count = [0]

    def tick(_):
        count[0] += 1

    xv, _ = gmres(
        op,
        rhs.ravel(order="F"),
        rtol=tol,
        atol=0.0,
        restart=n,
        maxiter=1,
        callback=tick,
        callback_type="pr_norm",
    )
    x = xv.reshape((p, q), order="F")
    residual = np.linalg.norm(apply(xv) - rhs.ravel(order="F")) / rhs_norm
    # GMRES stops on its internal (preconditioned) estimate; confirm explicitly.
    if residual > tol:
        raise NoConvergence(
            f"GMRES reached relative residual {residual:.3e} > {tol:g} "
            f"after {count[0]} of {n} iterations"
        )
    return (x, KrylovInfo(count[0], residual)) if return_info else x


@dataclass
class CPFactors:
    """Rank-``r`` CP model ``sum_u w_u a_u (x) b_u (x) c_u``.

    Factor columns have unit norm and weights are nonnegative; any sign is
    carried by ``factor_c``.
    """

    weights: np.ndarray
    factor_a: np.ndarray
    factor_b: np.ndarray
    factor_c: np.ndarray
    sweeps: int = 0
    degenerate: bool = False
    orthogonal: bool = False
    history: list = field(default_factory=list, repr=False)

    @property
    def rank(self):
        return self.weights.shape[0]

    def reconstruct(self):
        return np.einsum(
            "u,iu,ju,ku->ijk", self.weights, self.factor_a, self.factor_b, self.factor_c
        )


def _leading_vectors(unfolded, r, rng):
    u, _, _ = np.linalg.svd(unfolded, full_matrices=False)
    u = u[:, :r]
    if u.shape[1] < r:
        u = np.hstack([u, rng.standard_normal((unfolded.shape[0], r - u.shape[1]))])
    return u


def _gevd_init(tensor, r, rng):
    """Direct trilinear (GEVD) initialization; exact for noiseless rank-``r`` data.

    Needs two modes of size >= ``r`` and a third of size >= 2.  Returns None
    when that is not the case or the eigenproblem is degenerate.
    """
    dims = tensor.shape
    big = [m for m in range(3) if dims[m] >= r]
    if len(big) < 2:
        return None
    p, q = big[0], big[1]
    s = 3 - p - q
    if dims[s] < 2 and r > 1:
        return None
    t = np.transpose(tensor, (p, q, s))
    up = np.linalg.svd(t.reshape(dims[p], -1), full_matrices=False)[0][:, :r]
    uq = np.linalg.svd(t.transpose(1, 0, 2).reshape(dims[q], -1), full_matrices=False)[0][:, :r]
    core = np.einsum("ijk,ia,jb->abk", t, up, uq)
    w1, w2 = rng.standard_normal((2, dims[s]))
    x1 = core @ w1
    x2 = core @ w2
    try:
        evals, evecs = np.linalg.eig(x1 @ np.linalg.inv(x2))
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(evals)):
        return None
    fa = up @ evecs.real
    # with factor p fixed, each component's (q, s) slab is rank one
    rest = pseudo_inverse(fa) @ t.reshape(dims[p], -1)
    fb = np.empty((dims[q], r))
    fc = np.empty((dims[s], r))
    for u in range(r):
        uu, sv, vt = np.linalg.svd(rest[u].reshape(dims[q], dims[s]), full_matrices=False)
        fb[:, u] = uu[:, 0]
        fc[:, u] = sv[0] * vt[0]
    factors = [None, None, None]
    factors[p], factors[q], factors[s] = fa, fb, fc
    return factors


def _normalize_columns(m):
    norms = np.linalg.norm(m, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    out = m / safe
    # zero columns become a canonical unit vector so the unit-norm invariant holds
    for u in np.flatnonzero(norms == 0):
        out[:, u] = 0.0
        out[u % m.shape[0], u] = 1.0
    return out, norms


def _canonical_signs(weights, a, b, c):
    """Fix sign and order: weights >= 0, a/b columns with positive peak entry."""
    for u in range(weights.shape[0]):
        for f in (a, b):
            if f[np.argmax(np.abs(f[:, u])), u] < 0:
                f[:, u] *= -1
                c[:, u] *= -1
        if weights[u] < 0:
            weights[u] *= -1
            c[:, u] *= -1
    order = np.argsort(-weights, kind="stable")
    return weights[order], a[:, order], b[:, order], c[:, order]


def _check_tensor(tensor, r):
    tensor = np.asarray(tensor, dtype=float)
    if tensor.ndim != 3:
        raise DimensionMismatch(f"expected a 3-way tensor, got shape {tensor.shape}")
    if r < 1:
        raise ValidationError(f"rank must be >= 1, got {r}")
    if not np.all(np.isfinite(tensor)):
        raise ValidationError("tensor has non-finite entries")
    return tensor


def cp_decompose(tensor, r, *, max_sweeps=CP_MAX_SWEEPS, tol=1e-14, seed=0):
    """CP (PARAFAC) decomposition of a 3-way tensor by alternating least squares.

    Factors start from the leading left singular vectors of each mode
    unfolding (random columns pad modes smaller than ``r``).  Each sweep
    solves the three least-squares subproblems exactly; rank-deficient normal
    matrices fall back to a pseudo-inverse and raise a
    :class:`~mudra.errors.DegenerateFactor` warning.

    Parameters
    ----------
    tensor : ndarray, shape (d1, d2, d3)
    r : int
        Number of rank-one components.
    max_sweeps : int
        Cap on ALS sweeps (each sweep updates all three factors).
    tol : float
        Stop when the relative reconstruction error drops below ``tol`` or
        its change between sweeps does.
    seed : int
        Seed for the padding columns of the initialization.

    Returns
    -------
    CPFactors
    """
    tensor = _check_tensor(tensor, r)
    rng = np.random.default_rng(seed)
    d1, d2, d3 = tensor.shape
    norm_t = np.linalg.norm(tensor)
    if norm_t == 0.0:
        eye = [np.eye(d, r) for d in (d1, d2, d3)]
        return CPFactors(np.zeros(r), *[_normalize_columns(e)[0] for e in eye])

    init = _gevd_init(tensor, r, rng)
    if init is None:
        init = [
            _leading_vectors(tensor.reshape(d1, -1), r, rng),
            _leading_vectors(tensor.transpose(1, 0, 2).reshape(d2, -1), r, rng),
            _leading_vectors(tensor.transpose(2, 0, 1).reshape(d3, -1), r, rng),
        ]
    a, b, c = init

    degenerate = False

    def lstsq_update(mttkrp, g1, g2):
        nonlocal degenerate
        gram = g1 * g2
        s = np.linalg.svd(gram, compute_uv=False)
        if s[-1] <= PINV_RCOND * max(s[0], np.finfo(float).tiny):
            degenerate = True
        return mttkrp @ pseudo_inverse(gram)

    def rel_error(fa, fb, fc):
        return np.linalg.norm(tensor - np.einsum("ir,jr,kr->ijk", fa, fb, fc)) / norm_t

    history = []
    prev = np.inf
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        old = (a, b, c)
        # scale lives in c only, so a and b stay well conditioned
        a = lstsq_update(np.einsum("ijk,jr,kr->ir", tensor, b, c), b.T @ b, c.T @ c)
        a, _ = _normalize_columns(a)
        b = lstsq_update(np.einsum("ijk,ir,kr->jr", tensor, a, c), a.T @ a, c.T @ c)
        b, _ = _normalize_columns(b)
        c = lstsq_update(np.einsum("ijk,ir,jr->kr", tensor, a, b), a.T @ a, b.T @ b)
        err = rel_error(a, b, c)
        if sweeps > 1:
            # extrapolation line search (Bro 1998) to escape ALS swamps
            step = sweeps ** (1.0 / 3.0)
            trial = tuple(o + step * (n - o) for o, n in zip(old, (a, b, c)))
            trial_err = rel_error(*trial)
            if trial_err < err:
                a, b, c = trial
                err = trial_err
        history.append(err)
        if err < tol or abs(prev - err) < tol:
            break
        prev = err

    if degenerate:
        warnings.warn("rank-deficient CP subproblem; pseudo-inverse used", DegenerateFactor)
    c, w = _normalize_columns(c)
    w, a, b, c = _canonical_signs(w, a, b, c)
    return CPFactors(w, a, b, c, sweeps=sweeps, degenerate=degenerate, history=history)


def _polar(m):
    u, _, vt = np.linalg.svd(m, full_matrices=False)
    return u @ vt


def cp_decompose_orthogonal(tensor, r, *, max_sweeps=CP_MAX_SWEEPS, tol=1e-14):
    """CP decomposition with orthonormal first- and second-mode factors.

    Fits ``T[:, :, k] ~ A diag(d_k) B^T`` with ``A^T A = B^T B = I``.  Given
    ``A`` and ``B`` the optimal ``d_k`` is ``diag(A^T T_k B)``; given the
    others, ``A`` (resp. ``B``) is the orthogonal polar factor of the
    matching contraction.  Every block update is an exact maximization, so the
    fit never worsens.  Requires ``r <= d1`` and ``r <= d2``.

    The returned ``factor_c``/``weights`` split the third mode as usual:
    ``d_k[u] = weights[u] * factor_c[k, u]``.
    """
    tensor = _check_tensor(tensor, r)
    d1, d2, _ = tensor.shape
    if r > min(d1, d2):
        raise ValidationError(
            f"orthogonal CP needs r <= min(d1, d2) = {min(d1, d2)}, got {r}"
        )
    rng = np.random.default_rng(0)
    norm_t = np.linalg.norm(tensor)
    a = np.linalg.qr(_leading_vectors(tensor.reshape(d1, -1), r, rng))[0]
    b = np.linalg.qr(_leading_vectors(tensor.transpose(1, 0, 2).reshape(d2, -1), r, rng))[0]

    history = []
    prev = np.inf
    sweeps = 0
    d = np.einsum("ijk,iu,ju->ku", tensor, a, b)
    if norm_t > 0.0:
        for sweeps in range(1, max_sweeps + 1):
            a = _polar(np.einsum("ijk,ju,ku->iu", tensor, b, d))
            d = np.einsum("ijk,iu,ju->ku", tensor, a, b)
            b = _polar(np.einsum("ijk,iu,ku->ju", tensor, a, d))
            d = np.einsum("ijk,iu,ju->ku", tensor, a, b)
            err = np.linalg.norm(tensor - np.einsum("iu,ju,ku->ijk", a, b, d)) / norm_t
            history.append(err)
            if err < tol or abs(prev - err) < tol:
                break
            prev = err

    c, w = _normalize_columns(d)
    w, a, b, c = _canonical_signs(w, a, b, c)
    return CPFactors(w, a, b, c, sweeps=sweeps, orthogonal=True, history=history)


def pseudo_inverse(a):
    """Moore-Penrose pseudo-inverse with a ``1e-12`` relative singular-value cutoff."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return a.T.copy()
    return np.linalg.pinv(a, rcond=PINV_RCOND)


def sym_inv_sqrt(a):
    """Inverse square root of a symmetric positive-definite matrix.

    Raises
    ------
    NotPositiveDefinite
        If the smallest eigenvalue is ``<= 1e-12`` times the largest.
    """
    a = _as_matrix(a, "A")
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {a.shape}")
    evals, evecs = np.linalg.eigh((a + a.T) / 2)
    if evals[-1] <= 0 or evals[0] <= 1e-12 * evals[-1]:
        raise NotPositiveDefinite(
            f"eigenvalues in [{evals[0]:.3e}, {evals[-1]:.3e}] are not safely positive"
        )
    r = (evecs / np.sqrt(evals)) @ evecs.T
    return (r + r.T) / 2


def psd_factor(cov, name="covariance"):
    """Return ``L`` with ``L @ L.T == cov`` for a PSD matrix.

    Cholesky is tried first, then once more with ``1e-10 * trace`` jitter;
    singular PSD matrices fall back to a symmetric eigen-factor.
    """
    cov = _as_matrix(cov, name)
    n = cov.shape[0]
    if cov.shape != (n, n):
        raise DimensionMismatch(f"{name} must be square, got {cov.shape}")
    cov = (cov + cov.T) / 2
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * max(np.trace(cov), 0.0)
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(n))
    except np.linalg.LinAlgError:
        pass
    evals, evecs = np.linalg.eigh(cov)
    if evals[0] < -max(jitter, 1e-14):
        raise NotPositiveSemiDefinite(f"{name} has eigenvalue {evals[0]:.3e} < 0")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def sample_matrix_normal(mean, row_cov, col_cov, rng=None, size=None):
    """Draw from the matrix normal ``N(M, Sigma, Psi)``.

    ``vec(X) ~ N(vec(M), Psi (x) Sigma)``, realized as
    ``M + L_Sigma Z L_Psi^T`` with standard normal ``Z``.

    Parameters
    ----------
    mean : ndarray, shape (m, n)
    row_cov : ndarray, shape (m, m)
    col_cov : ndarray, shape (n, n)
    rng : numpy Generator or seed, optional
    size : int, optional
        Number of independent draws; output gains a leading axis when given.
    """
    rng = np.random.default_rng(rng)
    mean = _as_matrix(mean, "M")
    m, n = mean.shape
    row_cov = _as_matrix(row_cov, "Sigma")
    col_cov = _as_matrix(col_cov, "Psi")
    if row_cov.shape != (m, m) or col_cov.shape != (n, n):
        raise DimensionMismatch(
            f"covariances {row_cov.shape}, {col_cov.shape} do not match mean {mean.shape}"
        )
    l_row = psd_factor(row_cov, "row covariance")
    l_col = psd_factor(col_cov, "column covariance")
    shape = (m, n) if size is None else (size, m, n)
    z = rng.standard_normal(shape)
    return mean + l_row @ z @ l_col.T
