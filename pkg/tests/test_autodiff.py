import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from astcl import autodiff as ad
from astcl.autodiff import Param, Tape, Tensor, backward, finite_diff_check

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def test_matmul_identity_and_hand_values():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), x).value, x)
    np.testing.assert_array_equal(ad.matmul(x, [[1.0], [1.0]]).value, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_matches_finite_differences(rng):
    a = Param(rng.normal(size=(3, 4)))
    b = Param(rng.normal(size=(4, 2)))
    c = rng.normal(size=(3, 2))
    err = finite_diff_check(lambda: ad.sum_all(ad.mul(ad.matmul(a, b), c)), [a, b])
    assert err < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_associativity(n, m, k, p, seed):
    r = np.random.default_rng(seed)
    a, b, c = r.normal(size=(n, m)), r.normal(size=(m, k)), r.normal(size=(k, p))
    left = ad.matmul(ad.matmul(a, b), c).value
    right = ad.matmul(a, ad.matmul(b, c)).value
    np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)


def test_relu_values():
    np.testing.assert_array_equal(ad.relu([[-1.0, 2.0]]).value, [[0.0, 2.0]])
    np.testing.assert_array_equal(ad.relu(-np.ones((2, 3))).value, np.zeros((2, 3)))


def test_relu_gradient_away_from_kink(rng):
    v = rng.normal(size=(4, 5))
    v[np.abs(v) < 0.1] += 0.5  # keep central differences off the kink
    x = Param(v)
    assert finite_diff_check(lambda: ad.sum_all(ad.mul(ad.relu(x), ad.relu(x))), [x]) < 1e-6


def test_relu_subgradient_at_zero_is_zero():
    x = Param(np.zeros((1, 3)))
    with Tape() as tape:
        y = ad.sum_all(ad.relu(x))
    backward(tape, y)
    np.testing.assert_array_equal(x.grad, np.zeros((1, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_rows([[0.0, 0.0]]).value, [[0.5, 0.5]])
    np.testing.assert_allclose(ad.softmax_rows([[0.0, math.log(3.0)]]).value, [[0.25, 0.75]],
                               rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_softmax_rows_normalized_and_shift_invariant(x, c):
    s = ad.softmax_rows(x).value
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax_rows(x + c).value, s, atol=1e-12)


def test_softmax_large_logits_stay_finite():
    s = ad.softmax_rows([[1000.0, 1001.0]]).value
    assert np.all(np.isfinite(s))


def test_layer_norm_examples():
    ones, zeros = np.ones((1, 2)), np.zeros((1, 2))
    bias = np.array([[0.3, -0.7]])
    np.testing.assert_allclose(ad.layer_norm_rows([[5.0, 5.0]], ones, bias).value, bias)
    np.testing.assert_allclose(ad.layer_norm_rows([[1.0, 3.0]], ones, zeros, eps=0.0).value,
                               [[-1.0, 1.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=finite))
def test_layer_norm_row_statistics(x):
    h = x.shape[1]
    ones, zeros = np.ones((1, h)), np.zeros((1, h))
    var = x.var(axis=1)
    varied = x[var > 1e-6]
    if len(varied):
        y = ad.layer_norm_rows(varied, ones, zeros, eps=0.0).value
        np.testing.assert_array_less(np.abs(y.mean(axis=1)), 1e-9)
        np.testing.assert_array_less(np.abs(y.var(axis=1) - 1.0), 1e-6)
    # with the default eps the output variance is exactly v / (v + eps)
    y = ad.layer_norm_rows(x, ones, zeros).value
    np.testing.assert_array_less(np.abs(y.mean(axis=1)), 1e-9)
    np.testing.assert_allclose(y.var(axis=1), var / (var + ad.LAYER_NORM_EPS), atol=1e-9)


def test_layer_norm_gradient(rng):
    x = Param(rng.normal(size=(3, 5)))
    g = Param(rng.normal(size=(1, 5)))
    b = Param(rng.normal(size=(1, 5)))
    w = rng.normal(size=(3, 5))
    assert finite_diff_check(lambda: ad.sum_all(ad.mul(ad.layer_norm_rows(x, g, b), w)),
                             [x, g, b]) < 1e-6


def test_backward_sum_gives_ones():
    w = Param(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        y = ad.sum_all(w)
    backward(tape, y)
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_backward_square_gives_twice_w():
    w = Param(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        y = ad.sum_all(ad.mul(w, w))
    backward(tape, y)
    np.testing.assert_array_equal(w.grad, 2 * w.value)


def test_backward_empty_tape_is_noop():
    w = Param(np.ones((2, 2)))
    backward(Tape(), Tensor(1.0))
    np.testing.assert_array_equal(w.grad, np.zeros((2, 2)))


def test_gradients_accumulate_across_calls():
    w = Param(np.ones((1, 2)))
    for _ in range(2):
        with Tape() as tape:
            y = ad.sum_all(w)
        backward(tape, y)
    np.testing.assert_array_equal(w.grad, [[2.0, 2.0]])


def test_reused_intermediate_collects_both_paths():
    w = Param(np.array([[1.5, -2.0]]))
    with Tape() as tape:
        h = ad.mul(w, w)
        y = ad.sum_all(ad.add(h, ad.scale(h, 3.0)))
    backward(tape, y)
    np.testing.assert_allclose(w.grad, 8 * w.value)


def test_no_recording_without_tape():
    w = Param(np.ones((2, 2)))
    y = ad.sum_all(ad.mul(w, w))
    assert y.item() == 4.0


def test_finite_diff_check_quadratic():
    w = Param(np.array([[0.3, -1.2, 2.0]]))
    assert finite_diff_check(lambda: ad.sum_all(ad.mul(w, w)), [w]) < 1e-8


def test_ops_composite_gradients(rng):
    x = Param(rng.normal(size=(4, 3)))
    s = Param(rng.normal(size=(1, 1)))
    row = Param(rng.normal(size=(1, 3)))
    idx = [0, 2, 2, 3]

    def f():
        y = ad.add_row(ad.tanh(x), row)
        z = ad.take_rows(ad.softmax_rows(y), idx)
        sc = ad.mul(ad.exp(s), ad.sum_all(ad.mul(z, z)))
        return ad.add(sc, ad.sum_all(ad.mul(ad.mean_rows(x), ad.transpose(ad.sum_cols(ad.transpose(x))))))

    assert finite_diff_check(f, [x, s, row]) < 1e-6


def test_softmax_cross_entropy_gradient(rng):
    logits = Param(rng.normal(size=(3, 4)))
    t = rng.dirichlet(np.ones(4), size=3)
    assert finite_diff_check(lambda: ad.softmax_cross_entropy(logits, t), [logits]) < 1e-6
