import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import eigh

from mlgcp.fftfield import (EmbeddingError, build_kernel, dense_correlation, matvec,
                            sample_field, sqrt_matvec)
from mlgcp.pattern import GridSpec, Window, make_grid

UNIT = Window(0.0, 1.0, 0.0, 1.0)


def dense_sqrt(C):
    w, V = eigh(C)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def test_eigenvalues_match_dense():
    spec = make_grid(UNIT, 5, 5)  # 8 x 8 torus
    for phi in (0.05, 0.2):
        k = build_kernel(spec, phi)
        dense = np.sort(eigh(dense_correlation(spec, phi), eigvals_only=True))
        assert np.max(np.abs(np.sort(k.eigenvalues.ravel()) - dense)) < 1e-9


def test_sqrt_matvec_matches_dense_square_root(rng):
    spec = make_grid(UNIT, 5, 4)
    k = build_kernel(spec, 0.1)
    S = dense_sqrt(dense_correlation(spec, 0.1))
    v = rng.standard_normal(spec.size)
    assert np.max(np.abs(sqrt_matvec(k, v) - S @ v)) < 1e-9
    grid = v.reshape(spec.shape)
    assert np.allclose(sqrt_matvec(k, grid).ravel(), S @ v, atol=1e-9)


def test_constant_field_is_eigenvector():
    spec = make_grid(UNIT, 4, 4)
    k = build_kernel(spec, 0.1)
    row_sum = dense_correlation(spec, 0.1)[0].sum()
    assert np.allclose(matvec(k, np.ones(spec.shape)), row_sum, atol=1e-12)


def test_tiny_range_gives_identity(rng):
    spec = make_grid(UNIT, 4, 4)
    k = build_kernel(spec, 1e-6)
    v = rng.standard_normal(spec.shape)
    assert np.allclose(sqrt_matvec(k, v), v, atol=1e-12)


def test_self_adjoint(rng):
    spec = make_grid(UNIT, 6, 5)
    k = build_kernel(spec, 0.07)
    u, v = rng.standard_normal((2,) + spec.shape)
    assert np.vdot(u, sqrt_matvec(k, v)) == pytest.approx(np.vdot(sqrt_matvec(k, u), v), rel=1e-12)


def test_embedding_failure_for_long_range():
    spec = make_grid(UNIT, 8, 8)
    with pytest.raises(EmbeddingError, match="increase grid extension"):
        build_kernel(spec, 5.0)


def test_invalid_range():
    with pytest.raises(ValueError):
        build_kernel(make_grid(UNIT, 4, 4), 0.0)


def test_sample_field_has_unit_variance():
    spec = make_grid(UNIT, 16, 16)
    k = build_kernel(spec, 0.05)
    rng = np.random.default_rng(3)
    draws = np.array([sample_field(k, rng) for _ in range(400)])
    var = draws.var(axis=0).mean()
    assert var == pytest.approx(1.0, abs=0.05)
    # lag-one correlation along a row matches the exponential model
    lag = np.mean(draws[:, :, 0] * draws[:, :, 1])
    assert lag == pytest.approx(np.exp(-spec.cell_width / 0.05), abs=0.05)


def test_odd_extension_sizes(rng):
    spec = GridSpec(UNIT, 3, 3, 6, 5)
    k = build_kernel(spec, 0.3)
    S = dense_sqrt(dense_correlation(spec, 0.3))
    v = rng.standard_normal(spec.size)
    assert np.allclose(sqrt_matvec(k, v), S @ v, atol=1e-9)
    assert np.allclose(np.sort(k.eigenvalues.ravel()),
                       np.sort(eigh(dense_correlation(spec, 0.3), eigvals_only=True)), atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.3), st.integers(0, 2**32 - 1))
def test_square_root_squares_to_matrix(phi, seed):
    spec = make_grid(UNIT, 6, 6)
    k = build_kernel(spec, phi)
    v = np.random.default_rng(seed).standard_normal(spec.shape)
    assert np.allclose(sqrt_matvec(k, sqrt_matvec(k, v)), matvec(k, v), atol=1e-10)
