import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drciv import BasisSpec, build_basis, fit_series, predict_dm_dt, predict_m
from drciv.errors import ExtrapolationError, SampleSizeError
from drciv.sieve import fit_series_arrays

from conftest import make_data


def test_layout_power_j2():
    spec = BasisSpec("power", J=2)
    np.testing.assert_array_equal(build_basis(spec, [3.0], 5.0, 0), [3, 1, 5, 0, 0, 0])
    np.testing.assert_array_equal(build_basis(spec, [3.0], 5.0, 1), [3, 1, 5, 3, 1, 5])


@settings(max_examples=30, deadline=None)
@given(t=st.floats(0.0, 1.0), knots=st.sampled_from(["quantile", "uniform"]))
def test_bspline_partition_of_unity(t, knots):
    rng = np.random.default_rng(0)
    spec = BasisSpec("bspline", J=6, order=4, knots=knots).resolve(rng.uniform(0, 1, 200))
    lo, hi = spec.t_range
    tt = lo + t * (hi - lo)
    assert spec.t_block(tt).sum() == pytest.approx(1.0, abs=1e-12)
    assert all(lo < k < hi for k in spec.interior_knots)


def test_bspline_outside_support():
    spec = BasisSpec("bspline", J=5).resolve(np.linspace(0, 1, 50))
    with pytest.raises(ExtrapolationError):
        build_basis(spec, np.zeros(0), 2.0, 0)


def _span_data(n=400, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    t = rng.uniform(0, 4, n)
    z = rng.integers(0, 2, n)
    return make_data(x + 2 * t + z * (1 + t), t, z, x[:, None])


def test_model_in_span_reproduces_function_and_derivative():
    d = _span_data()
    f = fit_series(d, BasisSpec("power", J=2))
    assert np.abs(f.residuals).max() < 1e-8
    rng = np.random.default_rng(1)
    x, t, z = rng.normal(size=100), rng.uniform(0, 4, 100), rng.integers(0, 2, 100)
    np.testing.assert_allclose(predict_m(f, x[:, None], t, z), x + 2 * t + z * (1 + t), atol=1e-8)
    np.testing.assert_allclose(predict_dm_dt(f, x[:, None], t, z), np.where(z == 1, 3.0, 2.0), atol=1e-8)


def test_single_power_term_derivative_zero():
    # J=1 is the constant alone: m is flat in t
    f = fit_series(_span_data(), BasisSpec("power", J=1))
    t = np.linspace(0, 4, 9)
    np.testing.assert_array_equal(predict_dm_dt(f, np.zeros((9, 1)), t, 0), 0.0)


def test_linear_basis_derivative_constant():
    f = fit_series(_span_data(), BasisSpec("power", J=2))
    g = predict_dm_dt(f, np.zeros((9, 1)), np.linspace(0, 4, 9), 1)
    assert np.ptp(g) < 1e-12


@pytest.mark.parametrize("spec", [BasisSpec("power", J=4), BasisSpec("bspline", J=7, order=4)])
def test_finite_difference_derivative(spec):
    rng = np.random.default_rng(2)
    n = 600
    x, t, z = rng.normal(size=n), rng.uniform(0, 4, n), rng.integers(0, 2, n)
    y = np.sin(t) + 0.3 * x + z * np.cos(2 * t) + 0.1 * rng.normal(size=n)
    f = fit_series(make_data(y, t, z, x[:, None]), spec)
    h = 1e-4
    xs, ts, zs = rng.normal(size=100)[:, None], rng.uniform(0.2, 3.8, 100), rng.integers(0, 2, 100)
    fd = (predict_m(f, xs, ts + h, zs) - predict_m(f, xs, ts - h, zs)) / (2 * h)
    assert np.abs(fd - predict_dm_dt(f, xs, ts, zs)).max() < 1e-6


def test_normal_equations():
    rng = np.random.default_rng(3)
    n = 500
    x, t, z = rng.normal(size=(n, 2)), rng.exponential(size=n), rng.integers(0, 2, n)
    y = rng.standard_t(4, size=n) * 10
    f = fit_series(make_data(y, t, z, x), BasisSpec("power", J=3))
    assert np.abs(f.design.T @ f.residuals / n).max() <= 1e-8 * (1 + np.abs(y).max())


def test_pure_noise_coefficients_within_four_se():
    rng = np.random.default_rng(4)
    n = 10_000
    x, t, z = rng.normal(size=n), rng.uniform(0, 1, n), rng.integers(0, 2, n)
    f = fit_series(make_data(rng.normal(size=n), t, z, x[:, None]), BasisSpec("power", J=2))
    se = np.sqrt(np.diag(f.mho) / n)
    assert np.all(np.abs(f.coeffs) < 4 * se)


def test_duplicated_covariate_rank():
    rng = np.random.default_rng(5)
    n = 300
    x = rng.normal(size=n)
    t, z = rng.uniform(size=n), rng.integers(0, 2, n)
    f = fit_series(make_data(rng.normal(size=n), t, z, np.column_stack([x, x])), BasisSpec("power", J=2))
    # the copy is repeated in the level block and in the z block
    assert f.rank == f.full_rank - 2
    assert f.rank_deficient and f.warnings
    # minimum norm splits the weight evenly between the copies
    assert abs(f.coeffs[0] - f.coeffs[1]) < 1e-8


def test_single_dependency_rank_minus_one():
    rng = np.random.default_rng(6)
    n = 300
    t, z = rng.uniform(size=n), rng.integers(0, 2, n)
    # a covariate that vanishes on the z=1 arm leaves only its interaction column empty
    X = np.column_stack([rng.normal(size=n), (1 - z) * rng.normal(size=n)])
    f = fit_series_arrays(X, t, z.astype(float), rng.normal(size=n), BasisSpec("power", J=2))
    assert f.rank == f.full_rank - 1
    assert np.abs(f.design.T @ f.residuals / n).max() < 1e-10


def test_too_small_subsample():
    d = make_data(np.arange(6.0), np.arange(6.0) + 0.5, [0, 1] * 3)
    with pytest.raises(SampleSizeError):
        fit_series(d, BasisSpec("power", J=3))


def test_affine_reparameterization_invariance():
    rng = np.random.default_rng(7)
    n = 400
    x, t, z = rng.normal(size=n), rng.uniform(1, 3, n), rng.integers(0, 2, n)
    y = t**2 + x + z * t + rng.normal(size=n)
    X, zf = x[:, None], z.astype(float)
    base = fit_series_arrays(X, t, zf, y, BasisSpec("power", J=3))
    # raw monomials are a nonsingular linear transform of the standardized ones
    raw = fit_series_arrays(X, t, zf, y, BasisSpec("power", J=3, t_range=(-1.0, 1.0)))
    ts = rng.uniform(1, 3, 50)
    xs = rng.normal(size=(50, 1))
    for zz in (0, 1):
        np.testing.assert_allclose(predict_m(base, xs, ts, zz), predict_m(raw, xs, ts, zz), atol=1e-8)
        np.testing.assert_allclose(predict_dm_dt(base, xs, ts, zz), predict_dm_dt(raw, xs, ts, zz), atol=1e-8)


def test_variance_matrices_psd():
    rng = np.random.default_rng(8)
    n = 500
    x, t, z = rng.normal(size=(n, 2)), rng.uniform(size=n), rng.integers(0, 2, n)
    f = fit_series(make_data(rng.normal(size=n) * (1 + t), t, z, x), BasisSpec("bspline", J=5))
    for M in (f.omega, f.mho, f.gram):
        np.testing.assert_allclose(M, M.T, atol=1e-14)
    D = rng.normal(size=(100, f.full_rank))
    assert np.all(np.einsum("ip,pq,iq->i", D, f.mho, D) >= -1e-12)
    assert np.linalg.eigvalsh(f.omega).min() >= -1e-10 * np.abs(f.omega).max()
