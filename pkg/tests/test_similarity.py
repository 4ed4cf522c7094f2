import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from progkd.similarity import DegenerateInputError, center_gram, gram_linear, linear_cka, pooled_features
from progkd.tensor import ShapeError

# Independent N(0, 1) matrices with n = 64 samples and d = 32 features.
# The expected biased linear CKA is close to d / (d + n - 1) = 0.337. Over
# 2000 seed pairs the empirical mean was 0.333, std 0.016 and max 0.392.
# Both bounds were fixed from that run before this test was written.
GAUSS_MEAN_BOUND = 0.35
GAUSS_SEED_BOUND = 0.42

feature_mats = arrays(np.float64, st.tuples(st.integers(3, 12), st.integers(1, 6)),
                      elements=st.floats(-5, 5, allow_nan=False))


def cka_reference(x, y):
    """CKA from explicit centring-matrix products and traces."""
    n = len(x)
    h = np.eye(n) - np.ones((n, n)) / n
    k, l = x @ x.T, y @ y.T

    def hsic(a, b):
        return np.trace(a @ h @ b @ h) / (n - 1) ** 2

    return hsic(k, l) / np.sqrt(hsic(k, k) * hsic(l, l))


def non_degenerate(x):
    return np.linalg.norm(x - x.mean(axis=0)) > 1e-3 * max(1.0, np.linalg.norm(x))


def test_gram_is_symmetric():
    x = np.random.default_rng(0).normal(size=(10, 4))
    k = gram_linear(x)
    np.testing.assert_allclose(k, k.T, atol=1e-6)
    with pytest.raises(ShapeError):
        gram_linear(np.zeros(3))


def test_centering_zeroes_row_and_column_sums():
    k = gram_linear(np.random.default_rng(1).normal(size=(9, 3)))
    kc = center_gram(k)
    np.testing.assert_allclose(kc.sum(axis=0), 0, atol=1e-9)
    np.testing.assert_allclose(kc.sum(axis=1), 0, atol=1e-9)
    with pytest.raises(ShapeError):
        center_gram(np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(5))
def test_matches_trace_formula(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(20, 7)), rng.normal(size=(20, 3))
    assert linear_cka(x, y) == pytest.approx(cka_reference(x, y), abs=1e-10)


@given(feature_mats)
def test_self_similarity_is_one(x):
    if not non_degenerate(x):
        return
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-6)


@given(feature_mats, st.integers(0, 2**31), st.floats(0.01, 100))
def test_orthogonal_and_scale_invariance(x, seed, alpha):
    if not non_degenerate(x):
        return
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.normal(size=(x.shape[1], x.shape[1])))
    y = rng.normal(size=(len(x), 4))
    base = linear_cka(x, y)
    assert linear_cka(x @ q, y) == pytest.approx(base, abs=1e-6)
    assert linear_cka(alpha * x, y) == pytest.approx(base, abs=1e-6)


@given(feature_mats, feature_mats)
def test_bounded_and_symmetric(x, y):
    n = min(len(x), len(y))
    x, y = x[:n], y[:n]
    if not (non_degenerate(x) and non_degenerate(y)):
        return
    v = linear_cka(x, y)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(linear_cka(y, x), abs=1e-9)


def test_independent_gaussians_stay_low():
    values = [linear_cka(np.random.default_rng(s).normal(size=(64, 32)),
                         np.random.default_rng(1000 + s).normal(size=(64, 32))) for s in range(10)]
    assert np.mean(values) < GAUSS_MEAN_BOUND
    assert max(values) < GAUSS_SEED_BOUND


def test_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        linear_cka(np.zeros((4, 2)), np.zeros((5, 2)))
    with pytest.raises(ShapeError):
        linear_cka(np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        linear_cka(np.zeros(4), np.zeros((4, 1)))
    with pytest.raises(DegenerateInputError):
        linear_cka(np.ones((6, 3)), np.random.default_rng(0).normal(size=(6, 3)))


def test_pooled_features_concatenate_channel_means():
    a = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
    b = np.ones((2, 5, 2, 2))
    out = pooled_features([a, b])
    assert out.shape == (2, 8)
    np.testing.assert_allclose(out[:, :3], a.mean(axis=(2, 3)))
    np.testing.assert_allclose(out[:, 3:], 1.0)
