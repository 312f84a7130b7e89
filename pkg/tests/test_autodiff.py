"""Tests for the reverse-mode tape.

Expected values fall into three groups: trivial identities asserted
directly, frozen constants computed with scipy/numpy oracles, and a
finite-difference property check over randomly composed graphs.
"""
import numpy as np
import pytest

from setloss import autodiff as ad
from setloss.autodiff import Tape


def grad_of(build, x0):
    """Gradient of a scalar-valued builder at x0 via the tape."""
    tape = Tape()
    x = tape.leaf(x0)
    root = build(x)
    tape.backward(root)
    return x.grad if x.grad is not None else np.zeros_like(x.value)


def fd_grad(build, x0, h=1e-6):
    """Central finite differences, the independent gradient oracle."""
    x0 = np.asarray(x0, dtype=np.float64)
    out = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h

        def val(arr):
            tape = Tape()
            return build(tape.leaf(arr)).value[0, 0]

        out[idx] = (val(xp) - val(xm)) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# forward values

class TestForward:
    def test_add_broadcast_bias(self):
        tape = Tape()
        a = tape.leaf([[1.0, 2.0], [3.0, 4.0]])
        b = tape.leaf([[10.0, 20.0]])
        assert np.array_equal(ad.add(a, b).value, [[11.0, 22.0], [13.0, 24.0]])

    def test_sub_mul_neg(self):
        tape = Tape()
        a = tape.leaf([[3.0, -1.0]])
        b = tape.leaf([[1.0, 2.0]])
        assert np.array_equal(ad.sub(a, b).value, [[2.0, -3.0]])
        assert np.array_equal(ad.mul(a, b).value, [[3.0, -2.0]])
        assert np.array_equal(ad.neg(a).value, [[-3.0, 1.0]])

    def test_matmul_plain_and_transposed(self):
        A = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]])
        B = np.array([[1.0, -2.0], [3.0, 0.5], [0.0, 1.0]])
        tape = Tape()
        ta, tb = tape.leaf(A), tape.leaf(B)
        # scipy-free oracle: frozen product computed with numpy
        assert np.allclose(ad.matmul(ta, tb).value, [[7.0, 2.0], [-2.5, 2.5]])
        assert np.allclose(ad.matmul(ta, ta, transpose_a=True).value[0],
                           [1.25, 1.5, 5.0])
        assert np.allclose(ad.matmul(tb, ta, transpose_a=True,
                                     transpose_b=True).value, B.T @ A.T)

    def test_relu(self):
        tape = Tape()
        a = tape.leaf([[-1.0, 0.0, 2.0]])
        assert np.array_equal(ad.relu(a).value, [[0.0, 0.0, 2.0]])

    def test_sigmoid_frozen(self):
        tape = Tape()
        a = tape.leaf([[-1.0, 0.0, 2.5]])
        # scipy.special.expit oracle
        assert np.allclose(ad.sigmoid(a).value,
                           [[0.2689414213699951, 0.5, 0.9241418199787566]],
                           atol=1e-15)

    def test_log_exp_inverse(self):
        tape = Tape()
        a = tape.leaf([[0.5, 1.0, 2.0]])
        assert np.allclose(ad.log(ad.exp(a)).value, a.value, atol=1e-12)

    def test_softmax_frozen_and_normalized(self):
        A = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]])
        tape = Tape()
        s = ad.softmax(tape.leaf(A), axis=1)
        # scipy.special.softmax oracle
        assert np.allclose(s.value[0],
                           [0.09003057317038046, 0.24472847105479764,
                            0.6652409557748218], atol=1e-15)
        assert np.allclose(s.value.sum(axis=1), 1.0, atol=1e-12)

    def test_logsumexp_frozen(self):
        A = np.array([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]])
        tape = Tape()
        lse = ad.logsumexp(tape.leaf(A), axis=1)
        # scipy.special.logsumexp oracle
        assert np.allclose(lse.value[:, 0],
                           [3.40760596444438, 4.036269565124779], atol=1e-14)

    def test_logsumexp_bounds_and_stability(self):
        rng = np.random.default_rng(0)
        A = rng.normal(0, 5, size=(20, 7))
        tape = Tape()
        lse = ad.logsumexp(tape.leaf(A), axis=1).value[:, 0]
        assert np.all(lse >= A.max(axis=1) - 1e-12)
        assert np.all(lse <= A.max(axis=1) + np.log(7) + 1e-12)
        # extreme magnitudes must not overflow
        tape = Tape()
        big = ad.logsumexp(tape.leaf([[1e4, 1e4 - 1.0]]), axis=1)
        assert np.isfinite(big.value).all()
        assert big.value[0, 0] == pytest.approx(1e4 + np.log1p(np.exp(-1.0)))

    def test_reduce_min_max_values(self):
        A = np.array([[3.0, 1.0, 2.0], [5.0, 4.0, 6.0]])
        tape = Tape()
        t = tape.leaf(A)
        assert np.array_equal(ad.reduce_min(t, axis=1).value, [[1.0], [4.0]])
        assert np.array_equal(ad.reduce_max(t, axis=0).value, [[5.0, 4.0, 6.0]])
        assert ad.reduce_min(t).value[0, 0] == 1.0

    def test_clip_values(self):
        tape = Tape()
        a = tape.leaf([[0.0, 0.5, 1.0]])
        c = ad.clip(a, 1e-7)
        assert np.allclose(c.value, [[1e-7, 0.5, 1.0 - 1e-7]])

    def test_concat_slice_reshape_roundtrip(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(4, 3))
        tape = Tape()
        t = tape.leaf(A)
        parts = [ad.slice_cols(t, j, j + 1) for j in range(3)]
        assert np.array_equal(ad.concat(parts, axis=1).value, A)
        rows = [ad.slice_rows(t, i, i + 2) for i in (0, 2)]
        assert np.array_equal(ad.concat(rows, axis=0).value, A)
        assert np.array_equal(ad.reshape(t, 2, 6).value, A.reshape(2, 6))

    def test_sum_pool(self):
        tape = Tape()
        t = tape.leaf([[1.0, 2.0], [3.0, 4.0], [10.0, 20.0], [30.0, 40.0]])
        assert np.array_equal(ad.sum_pool(t, 2).value,
                              [[4.0, 6.0], [40.0, 60.0]])
        with pytest.raises(ValueError):
            ad.sum_pool(t, 3)

    def test_dropout_eval_is_identity(self):
        tape = Tape()
        t = tape.leaf([[1.0, 2.0, 3.0]])
        out = ad.dropout(t, 0.5, np.random.default_rng(0), training=False)
        assert out is t

    def test_dropout_train_masks_and_rescales(self):
        rng = np.random.default_rng(3)
        tape = Tape()
        t = tape.leaf(np.ones((200, 50)))
        out = ad.dropout(t, 0.4, rng).value
        kept = out != 0.0
        assert np.allclose(out[kept], 1.0 / 0.6)
        assert abs(kept.mean() - 0.6) < 0.02
        assert abs(out.mean() - 1.0) < 0.05

    def test_batchnorm_train_frozen(self):
        x0 = np.array([[1.0, 2.0], [3.0, -2.0], [0.0, 4.0]])
        tape = Tape()
        x = tape.leaf(x0)
        g = tape.leaf(np.ones((1, 2)))
        b = tape.leaf(np.zeros((1, 2)))
        rm, rv = np.zeros((1, 2)), np.ones((1, 2))
        out = ad.batchnorm(x, g, b, rm, rv, momentum=0.5, training=True)
        # numpy oracle: (x - mean) / sqrt(var + 1e-3)
        assert np.allclose(out.value,
                           [[-0.26717537790973667, 0.2672397681509484],
                            [1.3358768895486837, -1.3361988407547418],
                            [-1.0687015116389469, 1.0689590726037936]],
                           atol=1e-14)
        assert np.allclose(rm, 0.5 * x0.mean(axis=0, keepdims=True))
        assert np.allclose(rv, 0.5 + 0.5 * x0.var(axis=0, keepdims=True))

    def test_batchnorm_eval_uses_running_stats(self):
        tape = Tape()
        x = tape.leaf([[2.0, 3.0]])
        g = tape.leaf([[2.0, 1.0]])
        b = tape.leaf([[1.0, -1.0]])
        rm = np.array([[1.0, 1.0]])
        rv = np.array([[4.0, 0.0]])
        out = ad.batchnorm(x, g, b, rm, rv, eps=1e-3, training=False)
        expect = (np.array([[1.0, 2.0]]) / np.sqrt(rv + 1e-3)
                  * np.array([[2.0, 1.0]]) + np.array([[1.0, -1.0]]))
        assert np.allclose(out.value, expect)
        # eval mode must not touch the running stats
        assert np.array_equal(rm, [[1.0, 1.0]])
        assert np.array_equal(rv, [[4.0, 0.0]])

    def test_gumbel_softmax_eval_equals_tempered_softmax(self):
        logits = np.array([[1.0, 2.0, -1.0], [0.0, 0.0, 0.0]])
        tape = Tape()
        out = ad.gumbel_softmax_sample(tape.leaf(logits), 0.5, training=False)
        tape2 = Tape()
        ref = ad.softmax(tape2.leaf(logits / 0.5), axis=1)
        assert np.allclose(out.value, ref.value, atol=1e-12)
        assert np.allclose(out.value.sum(axis=1), 1.0)

    def test_gumbel_softmax_train_rows_normalized(self):
        rng = np.random.default_rng(7)
        tape = Tape()
        out = ad.gumbel_softmax_sample(tape.leaf(np.zeros((50, 4))), 1.0, rng)
        assert np.allclose(out.value.sum(axis=1), 1.0, atol=1e-12)
        # noise must differentiate the rows
        assert out.value.std() > 0.05

    def test_binary_concrete_eval_is_tempered_sigmoid(self):
        logits = np.array([[1.0, -2.0, 0.0]])
        tape = Tape()
        out = ad.binary_concrete_sample(tape.leaf(logits), 0.7, training=False)
        assert np.allclose(out.value, 1.0 / (1.0 + np.exp(-logits / 0.7)))

    def test_temperature_must_be_positive(self):
        tape = Tape()
        t = tape.leaf([[0.0]])
        with pytest.raises(ValueError):
            ad.gumbel_softmax_sample(t, 0.0, training=False)
        with pytest.raises(ValueError):
            ad.binary_concrete_sample(t, -1.0, training=False)

    def test_empty_reduction_rejected(self):
        tape = Tape()
        t = tape.leaf(np.zeros((0, 3)))
        with pytest.raises(ValueError, match="empty reduction"):
            ad.reduce_min(t, axis=0)
        with pytest.raises(ValueError, match="empty reduction"):
            ad.logsumexp(t, axis=0)


# ---------------------------------------------------------------------------
# backward values

class TestBackward:
    def test_root_must_be_scalar(self):
        tape = Tape()
        t = tape.leaf([[1.0, 2.0]])
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(t)

    def test_mixed_tapes_rejected(self):
        t1 = Tape().leaf([[1.0]])
        t2 = Tape().leaf([[1.0]])
        with pytest.raises(ValueError):
            ad.add(t1, t2)

    def test_sum_gradient_is_ones(self):
        g = grad_of(lambda x: ad.reduce_sum(x), np.array([[1.0, 2.0],
                                                          [3.0, 4.0]]))
        assert np.array_equal(g, np.ones((2, 2)))

    def test_reuse_accumulates(self):
        # d/dx sum(x * x) = 2x
        x0 = np.array([[1.0, -2.0, 3.0]])
        g = grad_of(lambda x: ad.reduce_sum(ad.mul(x, x)), x0)
        assert np.allclose(g, 2 * x0)

    def test_broadcast_bias_gradient_sums_rows(self):
        tape = Tape()
        x = tape.leaf(np.ones((4, 3)))
        b = tape.leaf(np.zeros((1, 3)))
        tape.backward(ad.reduce_sum(ad.add(x, b)))
        assert np.array_equal(b.grad, [[4.0, 4.0, 4.0]])

    def test_matmul_gradients(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        B = np.array([[0.5, -1.0], [2.0, 1.0]])
        tape = Tape()
        ta, tb = tape.leaf(A), tape.leaf(B)
        tape.backward(ad.reduce_sum(ad.matmul(ta, tb)))
        ones = np.ones((2, 2))
        assert np.allclose(ta.grad, ones @ B.T)
        assert np.allclose(tb.grad, A.T @ ones)

    def test_relu_gradient_zero_at_negative(self):
        g = grad_of(lambda x: ad.reduce_sum(ad.relu(x)),
                    np.array([[-1.0, 2.0, -3.0, 4.0]]))
        assert np.array_equal(g, [[0.0, 1.0, 0.0, 1.0]])

    def test_min_tie_routes_to_lowest_index(self):
        g = grad_of(lambda x: ad.reduce_sum(ad.reduce_min(x, axis=1)),
                    np.array([[2.0, 1.0, 1.0]]))
        assert np.array_equal(g, [[0.0, 1.0, 0.0]])

    def test_max_tie_routes_to_lowest_index(self):
        g = grad_of(lambda x: ad.reduce_sum(ad.reduce_max(x, axis=0)),
                    np.array([[5.0], [5.0]]))
        assert np.array_equal(g, [[1.0], [0.0]])

    def test_clip_gradient_masked_outside(self):
        g = grad_of(lambda x: ad.reduce_sum(ad.clip(x, 0.1)),
                    np.array([[0.05, 0.5, 0.95]]))
        assert np.array_equal(g, [[0.0, 1.0, 0.0]])

    def test_logsumexp_gradient_is_softmax(self):
        A = np.array([[1.0, 2.0, 3.0]])
        tape = Tape()
        t = tape.leaf(A)
        tape.backward(ad.reduce_sum(ad.logsumexp(t, axis=1)))
        e = np.exp(A - A.max())
        assert np.allclose(t.grad, e / e.sum(), atol=1e-12)

    def test_sum_pool_gradient_repeats(self):
        g = grad_of(lambda x: ad.reduce_sum(
            ad.mul(ad.sum_pool(x, 2), np.array([[1.0], [10.0]]))),
            np.zeros((4, 1)))
        assert np.array_equal(g, [[1.0], [1.0], [10.0], [10.0]])

    def test_backward_helper_zero_fills_unused_leaves(self):
        tape = Tape()
        x = tape.leaf([[1.0, 2.0]])
        unused = tape.leaf([[5.0]])
        grads = ad.backward(tape, ad.reduce_sum(x), [x, unused])
        assert np.array_equal(grads[0], [[1.0, 1.0]])
        assert np.array_equal(grads[1], [[0.0]])

    @pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
    def test_first_nonfinite_reports_earliest(self):
        tape = Tape()
        x = tape.leaf([[0.0]])
        bad = ad.log(x)  # -inf
        ad.exp(bad)
        assert tape.first_nonfinite() is bad


# ---------------------------------------------------------------------------
# finite-difference property over random graphs

def _random_graph_case(rng):
    """A random scalar graph builder plus a base point, kink-free."""
    n = int(rng.integers(1, 7))
    f = int(rng.integers(1, 7))
    x0 = rng.uniform(-2.0, 2.0, size=(n, f))
    x0 += 0.05 * np.sign(x0)  # keep away from relu kinks
    w = rng.normal(size=(f, f))
    choice = int(rng.integers(0, 8))

    def build(x):
        h = ad.matmul(x, x.tape.constant(w))
        if choice == 0:
            h = ad.sigmoid(h)
        elif choice == 1:
            h = ad.softmax(h, axis=1)
        elif choice == 2:
            h = ad.exp(ad.mul(h, 0.3))
        elif choice == 3:
            h = ad.logsumexp(h, axis=1)
        elif choice == 4:
            h = ad.relu(h)
        elif choice == 5:
            h = ad.mul(h, h)
        elif choice == 6:
            h = ad.add(ad.sigmoid(h), ad.neg(h))
        else:
            h = ad.concat([ad.sigmoid(h), h], axis=1)
        return ad.reduce_sum(h)

    return build, x0


def test_random_graphs_match_finite_differences():
    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(200):
        build, x0 = _random_graph_case(rng)
        g = grad_of(build, x0)
        fd = fd_grad(build, x0)
        err = np.abs(g - fd) - (1e-6 + 1e-4 * np.abs(fd))
        assert err.max() <= 0, "gradient mismatch: excess %g" % err.max()
        checked += 1
    assert checked == 200
