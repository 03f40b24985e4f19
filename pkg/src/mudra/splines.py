"""Clamped cubic B-spline bases and spline design matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidBasisSize, InvalidDomain, OutOfDomain

# Polynomial degree of the basis; set to 2 for the de Boor "order 3" reading.
DEGREE = 3


@dataclass(frozen=True)
class SplineBasis:
    """A clamped B-spline basis of ``b`` functions on ``[t_min, t_max]``."""

    knots: np.ndarray
    degree: int = DEGREE

    @property
    def b(self):
        return len(self.knots) - self.degree - 1

    @property
    def domain(self):
        return float(self.knots[0]), float(self.knots[-1])

    def __eq__(self, other):
        return (
            isinstance(other, SplineBasis)
            and self.degree == other.degree
            and np.array_equal(self.knots, other.knots)
        )

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))


def build_basis(b, t_min, t_max, degree=DEGREE):
    """Clamped basis with ``b - degree - 1`` equally spaced interior knots.

    >>> build_basis(7, 1, 12).knots[4:7]
    array([3.75, 6.5 , 9.25])
    """
    if b < degree + 1:
        raise InvalidBasisSize(f"need at least {degree + 1} basis functions, got {b}")
    t_min, t_max = float(t_min), float(t_max)
    if not t_min < t_max:
        raise InvalidDomain(f"empty domain [{t_min}, {t_max}]")
    n_interior = b - degree - 1
    interior = np.linspace(t_min, t_max, n_interior + 2)[1:-1]
    knots = np.concatenate(
        [np.full(degree + 1, t_min), interior, np.full(degree + 1, t_max)]
    )
    knots.setflags(write=False)
    return SplineBasis(knots=knots, degree=degree)


def _find_span(basis, t):
    # right endpoint belongs to the last nonempty span
    n = basis.b - 1
    if t >= basis.knots[n + 1]:
        return n
    return int(np.searchsorted(basis.knots, t, side="right")) - 1


def eval_basis(basis, t):
    """Values of all ``b`` basis functions at ``t`` (Cox-de Boor recursion)."""
    t = float(t)
    lo, hi = basis.domain
    if not lo <= t <= hi:
        raise OutOfDomain(f"t={t} outside spline domain [{lo}, {hi}]")
    p = basis.degree
    knots = basis.knots
    span = _find_span(basis, t)

    # nonzero functions N_{span-p..span, p}, built up degree by degree
    nz = np.zeros(p + 1)
    nz[0] = 1.0
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    for j in range(1, p + 1):
        left[j] = t - knots[span + 1 - j]
        right[j] = knots[span + j] - t
        saved = 0.0
        for r in range(j):
            temp = nz[r] / (right[r + 1] + left[j - r])
            nz[r] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        nz[j] = saved

    out = np.zeros(basis.b)
    out[span - p : span + 1] = nz
    return out


def spline_matrix(basis, times):
    """``T x b`` matrix whose row ``k`` is :func:`eval_basis` at ``times[k]``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    return np.vstack([eval_basis(basis, t) for t in times])
