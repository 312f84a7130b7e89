"""Permutation-invariant set losses built on a shared pairwise
cross-entropy cost matrix.

All four losses share the signature ``loss(X, Y, eps)`` where X is the
target set and Y the model output, both N x F matrices with entries in
[0, 1]. Passing plain arrays evaluates the loss and returns a float;
passing autodiff ``Tensor``s returns a ``Tensor`` so gradients can flow
through a training graph.
"""
from __future__ import annotations

import enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

DEFAULT_EPS = 1e-7

__all__ = [
    "DEFAULT_EPS",
    "LossKind",
    "elementwise_cross_entropy",
    "pairwise_cost_matrix",
    "pairwise_squared_error",
    "set_cross_entropy",
    "set_average_distance",
    "hausdorff_distance",
    "flattened_cross_entropy",
    "set_loss",
]


class LossKind(enum.Enum):
    """Selector for the four interchangeable training losses."""

    FLATTENED_CE = "ce"
    SCE = "sce"
    SET_AVERAGE = "avg"
    HAUSDORFF = "hausdorff"

    @classmethod
    def from_string(cls, s: str) -> "LossKind":
        for kind in cls:
            if kind.value == s:
                return kind
        raise ValueError("unknown loss kind %r (choose from %s)"
                         % (s, ", ".join(k.value for k in cls)))


def _check_shapes(xs, ys):
    if xs != ys:
        raise ValueError("set shape mismatch: %r vs %r" % (xs, ys))


def _prepare(X, Y):
    """Lift plain arrays onto a private tape. Returns (X, Y, is_graph)."""
    if isinstance(X, Tensor) or isinstance(Y, Tensor):
        tape = X.tape if isinstance(X, Tensor) else Y.tape
        if not isinstance(X, Tensor):
            X = tape.constant(np.asarray(X, dtype=np.float64))
        if not isinstance(Y, Tensor):
            Y = tape.constant(np.asarray(Y, dtype=np.float64))
        return X, Y, True
    tape = Tape()
    return (tape.constant(np.asarray(X, dtype=np.float64)),
            tape.constant(np.asarray(Y, dtype=np.float64)), False)


def elementwise_cross_entropy(x, y, eps: float = DEFAULT_EPS) -> float:
    """Bernoulli cross entropy between two feature rows in [0, 1]^F,
    with y clipped to [eps, 1-eps] so binary mismatches stay finite."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("feature dimension mismatch: %d vs %d"
                         % (x.size, y.size))
    yc = np.clip(y, eps, 1.0 - eps)
    return float(-(x * np.log(yc) + (1.0 - x) * np.log(1.0 - yc)).sum())


def _cost_matrix_graph(X: Tensor, Y: Tensor, eps: float) -> Tensor:
    """costs[i, j] = H(x_i, y_j), as a single pair of matmuls."""
    _check_shapes(X.shape, Y.shape)
    Yc = ad.clip(Y, eps)
    log_y = ad.log(Yc)
    log_1my = ad.log(ad.sub(1.0, Yc))
    pos = ad.matmul(X, log_y, transpose_b=True)
    negpart = ad.matmul(ad.sub(1.0, X), log_1my, transpose_b=True)
    return ad.neg(ad.add(pos, negpart))


def _squared_error_graph(X: Tensor, Y: Tensor) -> Tensor:
    """costs[i, j] = ||x_i - y_j||^2, via the usual quadratic expansion."""
    _check_shapes(X.shape, Y.shape)
    n = X.shape[0]
    sq_x = ad.reduce_sum(ad.mul(X, X), axis=1)              # N x 1
    sq_y = ad.reduce_sum(ad.mul(Y, Y), axis=1)              # N x 1
    cross = ad.matmul(X, Y, transpose_b=True)               # N x N
    return ad.add(ad.add(sq_x, ad.reshape(sq_y, 1, n)),
                  ad.mul(-2.0, cross))


def _cost(X: Tensor, Y: Tensor, eps: float, distance: str) -> Tensor:
    if distance == "cross_entropy":
        return _cost_matrix_graph(X, Y, eps)
    if distance == "squared_error":
        return _squared_error_graph(X, Y)
    raise ValueError("unknown element distance %r" % (distance,))


def pairwise_cost_matrix(X, Y, eps: float = DEFAULT_EPS):
    """N x N matrix of elementwise cross entropies between all row pairs."""
    X, Y, graph = _prepare(X, Y)
    C = _cost_matrix_graph(X, Y, eps)
    return C if graph else np.array(C.value)


def pairwise_squared_error(X, Y):
    X, Y, graph = _prepare(X, Y)
    C = _squared_error_graph(X, Y)
    return C if graph else np.array(C.value)


def set_cross_entropy(X, Y, eps: float = DEFAULT_EPS):
    """Set Cross Entropy: -sum_i logsumexp_j(-H(x_i, y_j)).

    Permutation-invariant in both arguments; every row permutation of a
    binary target is a global minimum. May be slightly negative when Y
    contains near-duplicate rows.
    """
    X, Y, graph = _prepare(X, Y)
    C = _cost_matrix_graph(X, Y, eps)
    t = ad.neg(ad.reduce_sum(ad.logsumexp(ad.neg(C), axis=1)))
    return t if graph else t.value.item()


def set_average_distance(X, Y, eps: float = DEFAULT_EPS, reduce: str = "mean",
                         distance: str = "cross_entropy"):
    """Directed set-average (Chamfer) distance: each target row is charged
    its cheapest match, summed or averaged over rows. Gradient reaches only
    the argmin entries."""
    if reduce not in ("sum", "mean"):
        raise ValueError("reduce must be 'sum' or 'mean'")
    X, Y, graph = _prepare(X, Y)
    C = _cost(X, Y, eps, distance)
    t = ad.reduce_sum(ad.reduce_min(C, axis=1))
    if reduce == "mean":
        t = ad.mul(t, 1.0 / X.shape[0])
    return t if graph else t.value.item()


def hausdorff_distance(X, Y, eps: float = DEFAULT_EPS,
                       distance: str = "cross_entropy"):
    """Directed Hausdorff distance: the worst-matched target row's cost.
    Gradient reaches the single max-of-min entry."""
    X, Y, graph = _prepare(X, Y)
    C = _cost(X, Y, eps, distance)
    t = ad.reduce_max(ad.reduce_min(C, axis=1))
    return t if graph else t.value.item()


def flattened_cross_entropy(X, Y, eps: float = DEFAULT_EPS):
    """Index-aligned cross entropy sum_i H(x_i, y_i): the permutation-
    sensitive baseline obtained by flattening both sets."""
    X, Y, graph = _prepare(X, Y)
    _check_shapes(X.shape, Y.shape)
    Yc = ad.clip(Y, eps)
    terms = ad.add(ad.mul(X, ad.log(Yc)),
                   ad.mul(ad.sub(1.0, X), ad.log(ad.sub(1.0, Yc))))
    t = ad.neg(ad.reduce_sum(terms))
    return t if graph else t.value.item()


def set_loss(kind: LossKind, X, Y, eps: float = DEFAULT_EPS,
             reduce: str = "mean"):
    """Uniform entry point used by the trainers."""
    if kind is LossKind.SCE:
        return set_cross_entropy(X, Y, eps)
    if kind is LossKind.SET_AVERAGE:
        return set_average_distance(X, Y, eps, reduce=reduce)
    if kind is LossKind.HAUSDORFF:
        return hausdorff_distance(X, Y, eps)
    if kind is LossKind.FLATTENED_CE:
        return flattened_cross_entropy(X, Y, eps)
    raise ValueError("unknown loss kind %r" % (kind,))
