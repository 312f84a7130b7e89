"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

A ``Tape`` records every operation in execution order. ``Tape.backward``
walks the record once in reverse and accumulates gradients into every node
that participated in the computation. Node values are immutable once
written; re-running a forward pass means building a new tape.

Only the operator set needed by the set losses and the networks is
provided. All values are 2-D float64 matrices; scalars are 1x1.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "softmax",
    "logsumexp",
    "reduce_sum",
    "reduce_min",
    "reduce_max",
    "clip",
    "concat",
    "slice_rows",
    "slice_cols",
    "reshape",
    "sum_pool",
    "dropout",
    "batchnorm",
    "gumbel_softmax_sample",
    "binary_concrete_sample",
    "backward",
]


def _as_matrix(value) -> np.ndarray:
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ValueError("values must be at most 2-D, got shape %r" % (a.shape,))
    return a


class Tensor:
    """One node of the computation graph: a matrix value plus the closure
    that routes an incoming gradient to its parents."""

    __slots__ = ("tape", "value", "op", "grad", "_backward")

    def __init__(self, tape: "Tape", value: np.ndarray, op: str, backward=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.grad = None
        self._backward = backward
        tape._nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return "Tensor(op=%s, shape=%s)" % (self.op, self.value.shape)

    # convenience operators; scalars and arrays are lifted as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of tensors; append order is a topological order."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def leaf(self, value, name: str = "leaf") -> Tensor:
        return Tensor(self, _as_matrix(value).copy(), name)

    def constant(self, value, name: str = "const") -> Tensor:
        return Tensor(self, _as_matrix(value), name)

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(node) into node.grad for every node that
        root depends on. The root must be a 1x1 scalar."""
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        if root.value.shape != (1, 1):
            raise ValueError("backward root must be scalar (1x1), got %r"
                             % (root.value.shape,))
        for n in self._nodes:
            n.grad = None
        root.grad = np.ones((1, 1))
        for n in reversed(self._nodes):
            if n.grad is not None and n._backward is not None:
                n._backward(n.grad)

    def first_nonfinite(self) -> Tensor | None:
        """First node (in execution order) holding a NaN/inf value, used
        for diagnostics when a loss blows up."""
        for n in self._nodes:
            if not np.all(np.isfinite(n.value)):
                return n
        return None


def backward(tape: Tape, root: Tensor, leaves: list[Tensor] | None = None):
    """Run the backward pass and return the gradient of each requested leaf
    (zeros where the root does not depend on the leaf)."""
    tape.backward(root)
    if leaves is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.value)
            for t in leaves]


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # copy so later accumulation never writes into an op's buffer
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
    raise TypeError("at least one argument must be a Tensor")


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors belong to different tapes")
        return x
    return tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] > 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] > 1:
        out = out.sum(axis=1, keepdims=True)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    value = a.value + b.value

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return Tensor(tape, value, "add", bwd)


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    value = a.value - b.value

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    return Tensor(tape, value, "sub", bwd)


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    value = a.value * b.value

    def bwd(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return Tensor(tape, value, "mul", bwd)


def neg(a) -> Tensor:
    tape = _tape_of(a)
    value = -a.value

    def bwd(g):
        _accum(a, -g)

    return Tensor(tape, value, "neg", bwd)


def matmul(a, b, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av = a.value.T if transpose_a else a.value
    bv = b.value.T if transpose_b else b.value
    if av.shape[1] != bv.shape[0]:
        raise ValueError("matmul shape mismatch: %r @ %r" % (av.shape, bv.shape))
    value = av @ bv

    def bwd(g):
        ga = g @ bv.T
        gb = av.T @ g
        _accum(a, ga.T if transpose_a else ga)
        _accum(b, gb.T if transpose_b else gb)

    return Tensor(tape, value, "matmul", bwd)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def relu(a) -> Tensor:
    tape = _tape_of(a)
    value = np.maximum(a.value, 0.0)

    def bwd(g):
        _accum(a, g * (a.value > 0.0))

    return Tensor(tape, value, "relu", bwd)


def sigmoid(a) -> Tensor:
    tape = _tape_of(a)
    v = a.value
    value = np.empty_like(v)
    pos = v >= 0
    value[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    value[~pos] = ev / (1.0 + ev)

    def bwd(g):
        _accum(a, g * value * (1.0 - value))

    return Tensor(tape, value, "sigmoid", bwd)


def log(a) -> Tensor:
    tape = _tape_of(a)
    value = np.log(a.value)

    def bwd(g):
        _accum(a, g / a.value)

    return Tensor(tape, value, "log", bwd)


def exp(a) -> Tensor:
    tape = _tape_of(a)
    value = np.exp(a.value)

    def bwd(g):
        _accum(a, g * value)

    return Tensor(tape, value, "exp", bwd)


def clip(a, eps: float) -> Tensor:
    """Clip entries to [eps, 1-eps]; gradient flows only through entries
    that were strictly inside the interval."""
    tape = _tape_of(a)
    value = np.clip(a.value, eps, 1.0 - eps)
    inside = (a.value > eps) & (a.value < 1.0 - eps)

    def bwd(g):
        _accum(a, g * inside)

    return Tensor(tape, value, "clip", bwd)


# ---------------------------------------------------------------------------
# softmax family

def _check_axis(a, axis):
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    if a.value.shape[axis] == 0:
        raise ValueError("empty reduction")


def softmax(a, axis: int = 1) -> Tensor:
    tape = _tape_of(a)
    _check_axis(a, axis)
    v = a.value
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    value = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * value).sum(axis=axis, keepdims=True)
        _accum(a, (g - dot) * value)

    return Tensor(tape, value, "softmax", bwd)


def logsumexp(a, axis: int = 1) -> Tensor:
    """Numerically stable log-sum-exp reduction; keeps the reduced axis as
    size 1. Backward distributes the gradient by the softmax weights."""
    tape = _tape_of(a)
    _check_axis(a, axis)
    v = a.value
    m = v.max(axis=axis, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=axis, keepdims=True)
    value = m + np.log(s)
    weights = e / s

    def bwd(g):
        _accum(a, g * weights)

    return Tensor(tape, value, "logsumexp", bwd)


# ---------------------------------------------------------------------------
# reductions

def reduce_sum(a, axis: int | None = None) -> Tensor:
    tape = _tape_of(a)
    if axis is None:
        value = a.value.sum().reshape(1, 1)

        def bwd(g):
            _accum(a, np.full_like(a.value, g[0, 0]))
    else:
        _check_axis(a, axis)
        value = a.value.sum(axis=axis, keepdims=True)

        def bwd(g):
            _accum(a, np.broadcast_to(g, a.value.shape).copy())

    return Tensor(tape, value, "sum", bwd)


def _reduce_extreme(a, axis, kind):
    tape = _tape_of(a)
    v = a.value
    argfn = np.argmin if kind == "min" else np.argmax
    if axis is None:
        if v.size == 0:
            raise ValueError("empty reduction")
        flat = argfn(v)  # first occurrence: ties break toward lowest index
        value = v.flat[flat].reshape(1, 1)

        def bwd(g):
            out = np.zeros_like(v)
            out.flat[flat] = g[0, 0]
            _accum(a, out)
    else:
        _check_axis(a, axis)
        idx = argfn(v, axis=axis)
        value = (np.take_along_axis(v, np.expand_dims(idx, axis), axis=axis))

        def bwd(g):
            out = np.zeros_like(v)
            np.put_along_axis(out, np.expand_dims(idx, axis), g, axis=axis)
            _accum(a, out)

    return Tensor(tape, value, kind, bwd)


def reduce_min(a, axis: int | None = None) -> Tensor:
    """Minimum along an axis; gradient is routed only to the argmin entry
    (ties broken toward the lowest index)."""
    return _reduce_extreme(a, axis, "min")


def reduce_max(a, axis: int | None = None) -> Tensor:
    return _reduce_extreme(a, axis, "max")


# ---------------------------------------------------------------------------
# shape ops

def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    tape = _tape_of(*tensors)
    tensors = [_lift(t, tape) for t in tensors]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, size in zip(tensors, sizes):
            sl = (slice(start, start + size) if axis == 0
                  else (slice(None), slice(start, start + size)))
            _accum(t, g[sl])
            start += size

    return Tensor(tape, value, "concat", bwd)


def slice_rows(a, start: int, stop: int) -> Tensor:
    tape = _tape_of(a)
    value = a.value[start:stop, :]

    def bwd(g):
        out = np.zeros_like(a.value)
        out[start:stop, :] = g
        _accum(a, out)

    return Tensor(tape, value, "slice", bwd)


def slice_cols(a, start: int, stop: int) -> Tensor:
    tape = _tape_of(a)
    value = a.value[:, start:stop]

    def bwd(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        _accum(a, out)

    return Tensor(tape, value, "slice", bwd)


def reshape(a, rows: int, cols: int) -> Tensor:
    tape = _tape_of(a)
    value = a.value.reshape(rows, cols)

    def bwd(g):
        _accum(a, g.reshape(a.value.shape))

    return Tensor(tape, value, "reshape", bwd)


def sum_pool(a, group_size: int) -> Tensor:
    """Sum consecutive groups of ``group_size`` rows: (G*k, F) -> (G, F).
    This is the permutation-invariant pooling of the set encoder."""
    tape = _tape_of(a)
    rows, cols = a.value.shape
    if rows % group_size != 0:
        raise ValueError("row count %d not divisible by group size %d"
                         % (rows, group_size))
    groups = rows // group_size
    value = a.value.reshape(groups, group_size, cols).sum(axis=1)

    def bwd(g):
        _accum(a, np.repeat(g, group_size, axis=0))

    return Tensor(tape, value, "sum_pool", bwd)


# ---------------------------------------------------------------------------
# stochastic / stateful ops

def dropout(a, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: surviving entries are scaled by 1/keep at train
    time so evaluation needs no rescaling. Identity when not training."""
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    tape = _tape_of(a)
    keep = 1.0 - rate
    mask = (rng.random(a.value.shape) < keep) / keep
    value = a.value * mask

    def bwd(g):
        _accum(a, g * mask)

    return Tensor(tape, value, "dropout", bwd)


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              momentum: float = 0.99, eps: float = 1e-3,
              training: bool = True) -> Tensor:
    """Batch normalization over the row axis with running statistics.

    ``running_mean``/``running_var`` are 1xF arrays updated in place at
    train time; at eval time the output is an affine map using them.
    """
    tape = _tape_of(x, gamma, beta)
    gamma, beta = _lift(gamma, tape), _lift(beta, tape)
    v = x.value
    if training:
        m = v.shape[0]
        mu = v.mean(axis=0, keepdims=True)
        var = v.var(axis=0, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        std = np.sqrt(var + eps)
        xhat = (v - mu) / std
        value = xhat * gamma.value + beta.value

        def bwd(g):
            _accum(gamma, (g * xhat).sum(axis=0, keepdims=True))
            _accum(beta, g.sum(axis=0, keepdims=True))
            dxhat = g * gamma.value
            dx = (dxhat
                  - dxhat.mean(axis=0, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=0, keepdims=True)) / std
            _accum(x, dx)
    else:
        std = np.sqrt(running_var + eps)
        xhat = (v - running_mean) / std
        value = xhat * gamma.value + beta.value

        def bwd(g):
            _accum(gamma, (g * xhat).sum(axis=0, keepdims=True))
            _accum(beta, g.sum(axis=0, keepdims=True))
            _accum(x, g * gamma.value / std)

    return Tensor(tape, value, "batchnorm", bwd)


def _gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax_sample(logits, temperature: float,
                          rng: np.random.Generator | None = None,
                          training: bool = True) -> Tensor:
    """Concrete / Gumbel-Softmax sample, one categorical group per row.

    At train time each row is softmax((logits + gumbel noise) / temperature);
    in eval mode the noise is omitted and the caller passes the final
    annealed temperature. Rows always sum to 1.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    tape = _tape_of(logits)
    if training:
        if rng is None:
            raise ValueError("training-mode sampling requires an rng")
        noise = _gumbel(rng, logits.value.shape)
    else:
        noise = 0.0
    v = (logits.value + noise) / temperature
    m = v.max(axis=1, keepdims=True)
    e = np.exp(v - m)
    value = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * value).sum(axis=1, keepdims=True)
        _accum(logits, (g - dot) * value / temperature)

    return Tensor(tape, value, "gumbel_softmax", bwd)


def binary_concrete_sample(logits, temperature: float,
                           rng: np.random.Generator | None = None,
                           training: bool = True) -> Tensor:
    """Binary special case of the Gumbel-Softmax: each entry is an
    independent relaxed Bernoulli, sigmoid((logits + logistic noise)/t).
    Equivalent to a 2-way Gumbel-Softmax with the second logit fixed at 0.
    """
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    tape = _tape_of(logits)
    if training:
        if rng is None:
            raise ValueError("training-mode sampling requires an rng")
        u = np.clip(rng.random(logits.value.shape), 1e-12, 1.0 - 1e-12)
        noise = np.log(u) - np.log1p(-u)
    else:
        noise = 0.0
    v = (logits.value + noise) / temperature
    value = 1.0 / (1.0 + np.exp(-np.clip(v, -500, 500)))

    def bwd(g):
        _accum(logits, g * value * (1.0 - value) / temperature)

    return Tensor(tape, value, "binary_concrete", bwd)
