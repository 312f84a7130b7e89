"""Tests for the four set losses.

The worked two-element example values (0.81, 0.25, 0.2025, 0.45) are
checked exactly; the structural facts (inequality chain, permutation
invariance, gradient pathology) are checked over seeded random sets with
an independent oracle implementation where one exists.
"""
import numpy as np
import pytest

from setloss import autodiff as ad
from setloss.autodiff import Tape
from setloss.losses import (DEFAULT_EPS, LossKind, elementwise_cross_entropy,
                            flattened_cross_entropy, hausdorff_distance,
                            pairwise_cost_matrix, pairwise_squared_error,
                            set_average_distance, set_cross_entropy, set_loss)

X_EX = np.array([[0.0, 1.0], [0.0, 0.0]])
Y1_EX = np.array([[0.1, 0.5], [0.1, 0.5]])
Y2_EX = np.array([[0.1, 0.5], [0.9, 0.5]])


def oracle_sce(X, Y, eps=DEFAULT_EPS):
    """Direct per-row implementation, no shared cost matrix."""
    total = 0.0
    for x in X:
        costs = np.array([elementwise_cross_entropy(x, y, eps) for y in Y])
        m = (-costs).max()
        total -= m + np.log(np.exp(-costs - m).sum())
    return total


def random_pair(rng, n, f):
    X = (rng.random((n, f)) < 0.5).astype(float)
    Y = rng.random((n, f))
    return X, Y


class TestWorkedExample:
    def test_sce_values(self):
        assert np.exp(-set_cross_entropy(X_EX, Y1_EX)) == pytest.approx(
            0.81, abs=1e-6)
        assert np.exp(-set_cross_entropy(X_EX, Y2_EX)) == pytest.approx(
            0.25, abs=1e-6)

    def test_set_average_sum_identical_for_both(self):
        a1 = set_average_distance(X_EX, Y1_EX, reduce="sum")
        a2 = set_average_distance(X_EX, Y2_EX, reduce="sum")
        assert np.exp(-a1) == pytest.approx(0.2025, abs=1e-6)
        assert np.exp(-a2) == pytest.approx(0.2025, abs=1e-6)

    def test_hausdorff_value(self):
        h = hausdorff_distance(X_EX, Y2_EX)
        assert np.exp(-h) == pytest.approx(0.45, abs=1e-6)

    def test_mean_is_sum_over_n(self):
        s = set_average_distance(X_EX, Y1_EX, reduce="sum")
        m = set_average_distance(X_EX, Y1_EX, reduce="mean")
        assert m == pytest.approx(s / 2.0, abs=1e-12)


class TestAgainstOracle:
    def test_sce_matches_row_by_row_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            X, Y = random_pair(rng, int(rng.integers(1, 9)),
                               int(rng.integers(1, 9)))
            assert set_cross_entropy(X, Y) == pytest.approx(
                oracle_sce(X, Y), rel=1e-10, abs=1e-10)

    def test_cost_matrix_matches_elementwise(self):
        rng = np.random.default_rng(1)
        X, Y = random_pair(rng, 5, 4)
        C = pairwise_cost_matrix(X, Y)
        for i in range(5):
            for j in range(5):
                assert C[i, j] == pytest.approx(
                    elementwise_cross_entropy(X[i], Y[j]), rel=1e-12)

    def test_squared_error_matrix(self):
        rng = np.random.default_rng(2)
        X, Y = random_pair(rng, 4, 3)
        C = pairwise_squared_error(X, Y)
        for i in range(4):
            for j in range(4):
                assert C[i, j] == pytest.approx(
                    ((X[i] - Y[j]) ** 2).sum(), abs=1e-10)

    def test_flattened_is_aligned_sum(self):
        rng = np.random.default_rng(3)
        X, Y = random_pair(rng, 6, 5)
        expect = sum(elementwise_cross_entropy(x, y) for x, y in zip(X, Y))
        assert flattened_cross_entropy(X, Y) == pytest.approx(expect,
                                                              rel=1e-12)

    def test_average_is_mean_of_row_minima(self):
        rng = np.random.default_rng(4)
        X, Y = random_pair(rng, 6, 5)
        C = pairwise_cost_matrix(X, Y)
        assert set_average_distance(X, Y) == pytest.approx(
            C.min(axis=1).mean(), rel=1e-12)
        assert hausdorff_distance(X, Y) == pytest.approx(
            C.min(axis=1).max(), rel=1e-12)


class TestInequalityChain:
    def test_chain_over_random_pairs(self):
        rng = np.random.default_rng(5)
        n1_equal = 0
        n1_total = 0
        strict = 0
        big_total = 0
        for _ in range(1000):
            n = int(rng.integers(1, 9))
            f = int(rng.integers(1, 9))
            X, Y = random_pair(rng, n, f)
            sh = set_cross_entropy(X, Y)
            a_mean = set_average_distance(X, Y, reduce="mean")
            a_sum = set_average_distance(X, Y, reduce="sum")
            fl = flattened_cross_entropy(X, Y)
            h = hausdorff_distance(X, Y)
            assert sh <= n * a_mean + 1e-9
            assert a_sum <= fl + 1e-9
            assert a_mean <= h + 1e-9
            if n == 1:
                n1_total += 1
                n1_equal += abs(sh - n * a_mean) < 1e-9
            else:
                big_total += 1
                strict += sh < n * a_mean - 1e-9
        assert n1_total > 0 and n1_equal == n1_total
        assert strict / big_total >= 0.99

    def test_global_minimum_at_binary_permutation(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n, f = 5, 6
            X = (rng.random((n, f)) < 0.5).astype(float)
            while len({row.tobytes() for row in X}) < n:
                X = (rng.random((n, f)) < 0.5).astype(float)
            perm = rng.permutation(n)
            exact = set_cross_entropy(X, X[perm])
            # clipping leaves a small positive floor; any perturbation
            # away from the permuted target must not go lower
            assert exact == pytest.approx(0.0, abs=1e-4)
            noisy = np.clip(X[perm] + rng.normal(0, 0.05, (n, f)), 0, 1)
            assert set_cross_entropy(X, noisy) >= exact - 1e-9


class TestPermutationInvariance:
    @pytest.mark.parametrize("loss", [set_cross_entropy,
                                      set_average_distance,
                                      hausdorff_distance])
    def test_invariance(self, loss):
        rng = np.random.default_rng(7)
        for _ in range(334):
            n = int(rng.integers(1, 9))
            f = int(rng.integers(1, 9))
            X, Y = random_pair(rng, n, f)
            pi, sigma = rng.permutation(n), rng.permutation(n)
            assert abs(loss(X[pi], Y[sigma]) - loss(X, Y)) < 1e-9

    def test_flattened_is_sensitive(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0]])
        Y = np.array([[0.9, 0.1], [0.1, 0.9]])
        assert (flattened_cross_entropy(X, Y[::-1])
                > flattened_cross_entropy(X, Y) + 1.0)


def _grad_wrt_y(loss_fn, X, Y0, **kw):
    tape = Tape()
    t = tape.leaf(Y0)
    root = loss_fn(X, t, **kw)
    tape.backward(root)
    return np.array(t.grad)


def _fd_wrt_y(loss_fn, X, Y0, h=1e-6, **kw):
    out = np.zeros_like(Y0)
    for idx in np.ndindex(Y0.shape):
        yp, ym = Y0.copy(), Y0.copy()
        yp[idx] += h
        ym[idx] -= h
        out[idx] = (loss_fn(X, yp, **kw) - loss_fn(X, ym, **kw)) / (2 * h)
    return out


class TestGradients:
    def test_zero_gradient_pathology_of_average(self):
        X = X_EX
        for y in (0.1, 0.5, 0.9):
            Y = np.array([[0.0, 0.5], [y, 0.5]])
            g = _grad_wrt_y(set_average_distance, X, Y, reduce="sum")
            fd = _fd_wrt_y(lambda a, b: set_average_distance(a, b,
                                                             reduce="sum"),
                           X, Y)
            assert abs(g[1, 0]) < 1e-9
            assert abs(fd[1, 0]) < 1e-9

    def test_sce_gradient_nonzero_at_same_point(self):
        Y = np.array([[0.0, 0.5], [0.9, 0.5]])
        g = _grad_wrt_y(set_cross_entropy, X_EX, Y)
        assert g[1, 0] > 1e-6
        fd = _fd_wrt_y(set_cross_entropy, X_EX, Y)
        assert fd[1, 0] > 1e-6

    @pytest.mark.parametrize("loss,kw", [
        (set_cross_entropy, {}),
        (set_average_distance, {"reduce": "mean"}),
        (hausdorff_distance, {}),
        (flattened_cross_entropy, {}),
    ])
    def test_matches_finite_differences(self, loss, kw):
        rng = np.random.default_rng(8)
        for _ in range(5):
            n = int(rng.integers(2, 6))
            f = int(rng.integers(2, 6))
            X = (rng.random((n, f)) < 0.5).astype(float)
            Y = rng.uniform(0.05, 0.95, (n, f))
            g = _grad_wrt_y(loss, X, Y, **kw)
            fd = _fd_wrt_y(loss, X, Y, **kw)
            assert np.abs(g - fd).max() < 1e-6 + 1e-4 * np.abs(fd).max()


class TestApi:
    def test_kind_round_trip(self):
        for kind in LossKind:
            assert LossKind.from_string(kind.value) is kind
        with pytest.raises(ValueError, match="unknown loss kind"):
            LossKind.from_string("chamfer")

    def test_set_loss_dispatch(self):
        rng = np.random.default_rng(9)
        X, Y = (rng.random((3, 4)) < 0.5).astype(float), rng.random((3, 4))
        assert set_loss(LossKind.SCE, X, Y) == set_cross_entropy(X, Y)
        assert set_loss(LossKind.SET_AVERAGE, X, Y) == set_average_distance(
            X, Y)
        assert set_loss(LossKind.HAUSDORFF, X, Y) == hausdorff_distance(X, Y)
        assert set_loss(LossKind.FLATTENED_CE, X, Y) == \
            flattened_cross_entropy(X, Y)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            set_cross_entropy(np.zeros((2, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError, match="mismatch"):
            elementwise_cross_entropy([0.0, 1.0], [0.5])

    def test_tensor_inputs_return_tensor_on_callers_tape(self):
        tape = Tape()
        Y = tape.leaf(np.full((2, 2), 0.5))
        t = set_cross_entropy(np.eye(2), Y)
        assert t.tape is tape
        assert t.value.shape == (1, 1)

    def test_binary_mismatch_is_finite(self):
        X = np.array([[1.0, 0.0]])
        Y = np.array([[0.0, 1.0]])
        v = set_cross_entropy(X, Y)
        assert np.isfinite(v)
        assert v == pytest.approx(-2 * np.log(DEFAULT_EPS), rel=1e-6)

    def test_reduce_validation(self):
        with pytest.raises(ValueError, match="reduce"):
            set_average_distance(X_EX, Y1_EX, reduce="median")
        with pytest.raises(ValueError, match="element distance"):
            set_average_distance(X_EX, Y1_EX, distance="manhattan")
