import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dba.errors import DimensionError, ParameterError
from dba.numeric import (dump_text, gaussian, jacobi_svd, load_text, make_rng, matmul,
                         numeric_rank, relative_frobenius_error, softmax_rows,
                         svd_lowrank_factor)


def power_iteration_svd(m, r, iters=2000, seed=0):
    """Leading singular triplets by power iteration with deflation."""
    rng = np.random.default_rng(seed)
    m = m.copy()
    sigmas = []
    for _ in range(r):
        v = rng.standard_normal(m.shape[1])
        for _ in range(iters):
            v = m.T @ (m @ v)
            nv = np.linalg.norm(v)
            if nv == 0:
                break
            v /= nv
        s = np.linalg.norm(m @ v)
        if s == 0:
            sigmas.append(0.0)
            continue
        u = m @ v / s
        sigmas.append(s)
        m = m - s * np.outer(u, v)
    return np.array(sigmas)


# --- matmul ------------------------------------------------------------------

def test_matmul_identity():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(np.eye(2), x), x)


def test_matmul_hand_example():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), np.array([[17.0], [39.0]]))


def test_matmul_zero_annihilates(rng):
    assert np.array_equal(matmul(np.zeros((3, 4)), rng.standard_normal((4, 2))), np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associative(rng):
    for _ in range(20):
        a, b, c = (rng.standard_normal((8, 8)) for _ in range(3))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        assert np.linalg.norm(left - right) / np.linalg.norm(left) < 1e-9


# --- softmax -----------------------------------------------------------------

def test_softmax_uniform_on_zero_row():
    assert np.allclose(softmax_rows(np.zeros((1, 4))), 0.25, atol=0, rtol=1e-15)


def test_softmax_closed_form():
    out = softmax_rows(np.array([[0.0, math.log(3.0)]]))
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)


def test_softmax_shift_invariant(rng):
    x = rng.standard_normal((3, 5))
    assert np.allclose(softmax_rows(x), softmax_rows(x + 17.5), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-700, 700)))
def test_softmax_rows_are_distributions(x):
    y = softmax_rows(x)
    assert np.all(y >= 0)
    assert np.all(np.isfinite(y))
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


# --- gaussian ----------------------------------------------------------------

def test_gaussian_deterministic():
    a = gaussian(make_rng(7), 2, 2, 1.0)
    b = gaussian(make_rng(7), 2, 2, 1.0)
    assert a.tobytes() == b.tobytes()


def test_gaussian_moments():
    d = 64
    x = gaussian(make_rng(0), 1000, 100, 1.0 / d)
    assert abs(x.var() - 1.0 / d) < 0.05 / d
    assert abs(gaussian(make_rng(1), 1000, 100, 1.0).mean()) < 0.01


@pytest.mark.parametrize("var", [0.0, -1.0])
def test_gaussian_rejects_nonpositive_variance(var):
    with pytest.raises(ParameterError):
        gaussian(make_rng(0), 2, 2, var)


def test_child_streams_differ_and_replay():
    a = make_rng(3, 1).standard_normal(4)
    b = make_rng(3, 2).standard_normal(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, make_rng(3, 1).standard_normal(4))


# --- SVD ---------------------------------------------------------------------

def test_svd_rank_one_outer_product(rng):
    u, v = rng.standard_normal(6), rng.standard_normal(6)
    m = np.outer(u, v)
    ur, sr, vtr = svd_lowrank_factor(m, 1)
    assert relative_frobenius_error(m, ur @ sr @ vtr) < 1e-10


def test_svd_identity_full_rank():
    ur, sr, vtr = svd_lowrank_factor(np.eye(4), 4)
    assert relative_frobenius_error(np.eye(4), ur @ sr @ vtr) < 1e-12


def test_svd_truncation_matches_power_iteration_oracle():
    rng = make_rng(0)
    m = rng.standard_normal((8, 3)) @ rng.standard_normal((3, 8))
    ur, sr, vtr = svd_lowrank_factor(m, 2)
    err = np.linalg.norm(m - ur @ sr @ vtr)
    sig = power_iteration_svd(m, 3)
    # Eckart-Young: the rank-2 error is the third singular value.
    assert abs(err - sig[2]) < 1e-8 * sig[0]
    assert np.allclose(np.diag(sr), sig[:2], rtol=1e-9)


def test_jacobi_matches_reference_factorization(rng):
    for shape in [(7, 4), (4, 7), (5, 5)]:
        m = rng.standard_normal(shape)
        u, s, vt = jacobi_svd(m)
        assert np.allclose(u @ np.diag(s) @ vt, m, atol=1e-12)
        assert np.all(np.diff(s) <= 0)
        assert np.allclose(vt @ vt.T, np.eye(vt.shape[0]), atol=1e-12)


def test_svd_lowrank_errors():
    with pytest.raises(DimensionError):
        svd_lowrank_factor(np.ones((3, 4)), 1)
    with pytest.raises(DimensionError):
        svd_lowrank_factor(np.eye(3), 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2 ** 31 - 1))
def test_rank_of_qk_bounded_by_min_n_d(n, d, seed):
    rng = make_rng(seed)
    q, k = rng.standard_normal((n, d)), rng.standard_normal((n, d))
    assert numeric_rank(q @ k.T) <= min(n, d)


# --- text dumps ----------------------------------------------------------------

def test_dump_roundtrip_is_exact(rng):
    x = rng.standard_normal((3, 4)) * 1e-7
    text = dump_text(x)
    assert text.splitlines()[0] == "3 4"
    assert np.array_equal(load_text(text), x)


def test_dump_rejects_wrong_count():
    with pytest.raises(DimensionError):
        load_text("2 2\n1 2 3\n")
