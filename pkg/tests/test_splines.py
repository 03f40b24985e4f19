import numpy as np
import pytest
from scipy.interpolate import BSpline

from mudra.errors import InvalidBasisSize, InvalidDomain, OutOfDomain
from mudra.splines import build_basis, eval_basis, spline_matrix


def test_cubic_bernstein_midpoint():
    basis = build_basis(4, 0, 1)
    np.testing.assert_allclose(eval_basis(basis, 0.5), [0.125, 0.375, 0.375, 0.125], atol=1e-15)


@pytest.mark.parametrize("b", [4, 5, 7, 10])
def test_endpoints_are_clamped(b):
    basis = build_basis(b, 0, 1)
    e0, e1 = np.zeros(b), np.zeros(b)
    e0[0], e1[-1] = 1, 1
    np.testing.assert_allclose(eval_basis(basis, 0.0), e0, atol=1e-15)
    np.testing.assert_allclose(eval_basis(basis, 1.0), e1, atol=1e-15)


def test_interior_knots_for_seven_functions():
    np.testing.assert_allclose(build_basis(7, 1, 12).knots[4:7], [3.75, 6.5, 9.25])


@pytest.mark.parametrize("b,lo,hi", [(4, 0, 1), (7, 1, 12), (9, -2.5, 3.0)])
def test_matches_scipy_design_matrix(b, lo, hi):
    basis = build_basis(b, lo, hi)
    t = np.linspace(lo, hi, 37)
    ref = BSpline.design_matrix(t, np.asarray(basis.knots), 3).toarray()
    np.testing.assert_allclose(spline_matrix(basis, t), ref, atol=1e-14)


def test_partition_of_unity_and_nonnegativity(rng):
    basis = build_basis(8, 0, 3)
    s = spline_matrix(basis, rng.uniform(0, 3, 1000))
    assert np.abs(s.sum(axis=1) - 1).max() <= 1e-12
    assert np.all(s >= 0)


def test_integer_grid_rows_sum_to_one():
    s = spline_matrix(build_basis(7, 1, 12), np.arange(1.0, 13.0))
    assert s.shape == (12, 7)
    assert np.abs(s.sum(axis=1) - 1).max() <= 1e-12


def test_single_and_repeated_times():
    basis = build_basis(6, 2, 5)
    np.testing.assert_array_equal(spline_matrix(basis, [2.0]), [[1, 0, 0, 0, 0, 0]])
    rows = spline_matrix(basis, [3.3] * 4)
    assert np.all(rows == rows[0])


def test_local_support(rng):
    basis = build_basis(9, 0, 1)
    for t in rng.uniform(0, 1, 50):
        assert np.count_nonzero(eval_basis(basis, t)) <= 4


def test_reproduces_cubics():
    # B-splines of degree 3 span all cubic polynomials on the domain
    basis = build_basis(6, 0, 2)

    def cubic(t):
        return 1 - 2 * t + 0.5 * t**3

    fit_t = np.linspace(0, 2, 40)
    coef = np.linalg.lstsq(spline_matrix(basis, fit_t), cubic(fit_t), rcond=None)[0]
    check_t = np.random.default_rng(3).uniform(0, 2, 100)
    assert np.abs(spline_matrix(basis, check_t) @ coef - cubic(check_t)).max() <= 1e-10


def test_basis_is_hashable_value():
    assert build_basis(5, 0, 1) == build_basis(5, 0, 1)
    assert hash(build_basis(5, 0, 1)) == hash(build_basis(5, 0, 1))
    assert build_basis(5, 0, 1) != build_basis(6, 0, 1)


def test_errors():
    with pytest.raises(InvalidBasisSize):
        build_basis(3, 0, 1)
    with pytest.raises(InvalidDomain):
        build_basis(5, 1, 1)
    with pytest.raises(OutOfDomain):
        eval_basis(build_basis(5, 0, 1), 1.5)
