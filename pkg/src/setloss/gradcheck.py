"""Finite-difference gradient checking for the autodiff ops, the set
losses, and the end-to-end models. Used both by the test suite and the
``setloss gradcheck`` command."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .losses import (LossKind, flattened_cross_entropy, hausdorff_distance,
                     set_average_distance, set_cross_entropy)

__all__ = [
    "GradReport",
    "finite_difference",
    "check_gradients",
    "op_checks",
    "loss_checks",
    "model_check",
    "run_suite",
]

DEFAULT_H = 1e-5
DEFAULT_RTOL = 1e-4
DEFAULT_FLOOR = 1e-7


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    ok: bool

    def line(self) -> str:
        status = "ok  " if self.ok else "FAIL"
        return ("%s %-28s rel_err=%.3e at %s (analytic=%.6g numeric=%.6g)"
                % (status, self.name, self.max_rel_err, self.worst_index,
                   self.analytic, self.numeric))


def finite_difference(f, x: np.ndarray, h: float = DEFAULT_H) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        grad[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def check_gradients(name, build, params: dict, rtol: float = DEFAULT_RTOL,
                    floor: float = DEFAULT_FLOOR, h: float = DEFAULT_H):
    """Compare tape gradients of ``build(tape, lifted) -> scalar Tensor``
    against central differences for every parameter array."""
    tape = Tape()
    lifted = {k: tape.leaf(v, name=k) for k, v in params.items()}
    root = build(tape, lifted)
    tape.backward(root)
    reports = []
    for key, value in params.items():
        analytic = lifted[key].grad
        if analytic is None:
            analytic = np.zeros_like(value)

        def f(x, key=key):
            t = Tape()
            lf = {k: t.leaf(x if k == key else v, name=k)
                  for k, v in params.items()}
            return build(t, lf).value.item()

        numeric = finite_difference(f, value, h=h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                           floor)
        rel = np.abs(analytic - numeric) / denom
        worst = np.unravel_index(np.argmax(rel), rel.shape)
        reports.append(GradReport(
            name="%s/%s" % (name, key), max_rel_err=float(rel[worst]),
            worst_index=tuple(int(i) for i in worst),
            analytic=float(analytic[worst]), numeric=float(numeric[worst]),
            ok=bool(rel[worst] <= rtol)))
    return reports


# ---------------------------------------------------------------------------
# suites

def _away_from_kinks(rng, shape, margin=0.05):
    """Random values in [margin, 1-margin], keeping clip/min/max/relu
    inputs away from their non-differentiable points."""
    return margin + (1.0 - 2.0 * margin) * rng.random(shape)


def op_checks(rtol: float = DEFAULT_RTOL, seed: int = 0):
    """One gradcheck per autodiff op on fixed random inputs."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4, 5)) + _away_from_kinks(rng, (4, 5))
    b = rng.standard_normal((4, 5)) + _away_from_kinks(rng, (4, 5))
    w = rng.standard_normal((5, 3))
    pos = _away_from_kinks(rng, (4, 5))
    reports = []

    def add_case(name, build, params):
        reports.extend(check_gradients(name, build, params, rtol=rtol))

    s = ad.reduce_sum
    add_case("add", lambda t, p: s(ad.add(p["a"], p["b"])), {"a": a, "b": b})
    add_case("add_row_broadcast",
             lambda t, p: s(ad.mul(ad.add(p["a"], p["r"]), p["a"])),
             {"a": a, "r": rng.standard_normal((1, 5))})
    add_case("sub", lambda t, p: s(ad.mul(ad.sub(p["a"], p["b"]), p["a"])),
             {"a": a, "b": b})
    add_case("mul", lambda t, p: s(ad.mul(p["a"], p["b"])), {"a": a, "b": b})
    add_case("neg", lambda t, p: s(ad.mul(ad.neg(p["a"]), p["b"])),
             {"a": a, "b": b})
    add_case("matmul", lambda t, p: s(ad.matmul(p["a"], p["w"])),
             {"a": a, "w": w})
    add_case("matmul_transpose",
             lambda t, p: s(ad.matmul(p["a"], p["b"], transpose_b=True)),
             {"a": a, "b": b})
    add_case("relu", lambda t, p: s(ad.relu(p["a"])), {"a": a})
    add_case("sigmoid", lambda t, p: s(ad.mul(ad.sigmoid(p["a"]), p["b"])),
             {"a": a, "b": b})
    add_case("log", lambda t, p: s(ad.log(p["pos"])), {"pos": pos})
    add_case("exp", lambda t, p: s(ad.exp(p["a"])), {"a": a})
    add_case("clip", lambda t, p: s(ad.mul(ad.clip(p["pos"], 1e-7), p["b"])),
             {"pos": pos, "b": b})
    add_case("softmax", lambda t, p: s(ad.mul(ad.softmax(p["a"], axis=1),
                                              p["b"])),
             {"a": a, "b": b})
    add_case("logsumexp_row",
             lambda t, p: s(ad.logsumexp(p["a"], axis=1)), {"a": a})
    add_case("logsumexp_col",
             lambda t, p: s(ad.logsumexp(p["a"], axis=0)), {"a": a})
    add_case("sum_axis", lambda t, p: s(ad.mul(ad.reduce_sum(p["a"], axis=0),
                                               ad.reduce_sum(p["b"], axis=0))),
             {"a": a, "b": b})
    add_case("min", lambda t, p: s(ad.reduce_min(p["a"], axis=1)), {"a": a})
    add_case("max", lambda t, p: s(ad.reduce_max(p["a"], axis=0)), {"a": a})
    add_case("min_all", lambda t, p: ad.reduce_min(p["a"]), {"a": a})
    add_case("concat",
             lambda t, p: s(ad.mul(ad.concat([p["a"], p["b"]], axis=1),
                                   ad.concat([p["b"], p["a"]], axis=1))),
             {"a": a, "b": b})
    add_case("slice_rows", lambda t, p: s(ad.mul(ad.slice_rows(p["a"], 1, 3),
                                                 ad.slice_rows(p["b"], 1, 3))),
             {"a": a, "b": b})
    add_case("slice_cols", lambda t, p: s(ad.mul(ad.slice_cols(p["a"], 1, 4),
                                                 ad.slice_cols(p["b"], 1, 4))),
             {"a": a, "b": b})
    add_case("reshape", lambda t, p: s(ad.mul(ad.reshape(p["a"], 5, 4),
                                              ad.reshape(p["b"], 5, 4))),
             {"a": a, "b": b})
    add_case("sum_pool", lambda t, p: s(ad.mul(ad.sum_pool(p["a"], 2),
                                               ad.sum_pool(p["b"], 2))),
             {"a": a, "b": b})
    add_case("dropout",
             lambda t, p: s(ad.dropout(p["a"], 0.5,
                                       np.random.default_rng(7))),
             {"a": a})
    add_case("batchnorm",
             lambda t, p: s(ad.mul(
                 ad.batchnorm(p["a"], p["g"], p["be"],
                              np.zeros((1, 5)), np.ones((1, 5)),
                              training=True), p["b"])),
             {"a": a, "b": b, "g": 1.0 + 0.1 * rng.standard_normal((1, 5)),
              "be": 0.1 * rng.standard_normal((1, 5))})
    add_case("batchnorm_eval",
             lambda t, p: s(ad.batchnorm(p["a"], p["g"], p["be"],
                                         rng.standard_normal((1, 5)) * 0 + 0.2,
                                         np.ones((1, 5)) * 0.8,
                                         training=False)),
             {"a": a, "g": np.ones((1, 5)), "be": np.zeros((1, 5))})
    add_case("gumbel_softmax",
             lambda t, p: s(ad.mul(
                 ad.gumbel_softmax_sample(p["a"], 0.8,
                                          np.random.default_rng(3)),
                 p["b"])),
             {"a": a, "b": b})
    add_case("binary_concrete",
             lambda t, p: s(ad.mul(
                 ad.binary_concrete_sample(p["a"], 0.8,
                                           np.random.default_rng(3)),
                 p["b"])),
             {"a": a, "b": b})
    return reports


def loss_checks(rtol: float = DEFAULT_RTOL, seed: int = 0, cases: int = 5):
    """Gradchecks for the four losses at random (X, Y) points, plus the
    set cross entropy at the two-element worked-example point at a tight
    tolerance."""
    rng = np.random.default_rng(seed)
    reports = []
    builders = {
        "sce": lambda t, p: set_cross_entropy(p["x"], p["y"]),
        "avg": lambda t, p: set_average_distance(p["x"], p["y"]),
        "hausdorff": lambda t, p: hausdorff_distance(p["x"], p["y"]),
        "flattened": lambda t, p: flattened_cross_entropy(p["x"], p["y"]),
    }
    for case in range(cases):
        n = int(rng.integers(1, 7))
        f = int(rng.integers(1, 7))
        x = _away_from_kinks(rng, (n, f))
        y = _away_from_kinks(rng, (n, f))
        for name, build in builders.items():
            reports.extend(check_gradients(
                "%s[%d]" % (name, case), build, {"x": x, "y": y}, rtol=rtol))
    # the two-element example from the loss discussion, checked tighter
    x = np.array([[0.0, 1.0], [0.0, 0.0]])
    y = np.array([[0.1, 0.5], [0.9, 0.5]])
    reports.extend(check_gradients(
        "sce_worked_example",
        lambda t, p: set_cross_entropy(x, p["y"]), {"y": y},
        rtol=1e-6, h=1e-6))
    return reports


def model_check(rtol: float = 1e-3, seed: int = 0):
    """End-to-end gradcheck of a tiny autoencoder (dropout and batchnorm
    off, deterministic latent noise) through the set cross entropy."""
    from .losses import set_loss
    from .nets import AutoencoderCore

    rng = np.random.default_rng(seed)
    core = AutoencoderCore(n_elements=3, n_features=4,
                           segments=((4, "sigmoid"),), width=6,
                           latent_units=5, latent_mode="gumbel-binary",
                           use_batchnorm=False, dropout_rate=0.0, seed=seed)
    batch = (rng.random((2, 3, 4)) > 0.5).astype(np.float64)

    def build(tape, lifted):
        out = core.forward(tape, lifted, batch, mode="train",
                           rng=np.random.default_rng(11), temperature=1.0)
        total = None
        for i in range(batch.shape[0]):
            y_i = ad.slice_rows(out, i * 3, (i + 1) * 3)
            l_i = set_loss(LossKind.SCE, batch[i], y_i)
            total = l_i if total is None else ad.add(total, l_i)
        return total

    keys = sorted(core.params)
    picked = {k: core.params[k] for k in keys}
    reports = []
    tape = Tape()
    lifted = {k: tape.leaf(v, name=k) for k, v in picked.items()}
    root = build(tape, lifted)
    tape.backward(root)
    # checking every coordinate of every weight matrix is slow; probe 10
    # random coordinates per array instead
    for key in keys:
        value = picked[key]
        analytic = lifted[key].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        flat_idx = np.random.default_rng(zlib.crc32(key.encode())).integers(
            0, value.size, size=min(10, value.size))
        worst_rel = 0.0
        worst = (0,)
        worst_pair = (0.0, 0.0)
        for fi in np.unique(flat_idx):
            idx = np.unravel_index(int(fi), value.shape)

            def f(delta):
                x = value.copy()
                x[idx] += delta
                t = Tape()
                lf = {k: t.leaf(x if k == key else v, name=k)
                      for k, v in picked.items()}
                return build(t, lf).value.item()

            num = (f(1e-5) - f(-1e-5)) / 2e-5
            ana = float(analytic[idx])
            denom = max(abs(num), abs(ana), DEFAULT_FLOOR)
            rel = abs(num - ana) / denom
            if rel > worst_rel:
                worst_rel, worst, worst_pair = rel, idx, (ana, num)
        reports.append(GradReport(
            name="model/%s" % key, max_rel_err=worst_rel,
            worst_index=tuple(int(i) for i in worst),
            analytic=worst_pair[0], numeric=worst_pair[1],
            ok=worst_rel <= rtol))
    return reports


def run_suite(inject_bad_op: bool = False):
    """Full suite: every op, the losses, and the end-to-end model.
    ``inject_bad_op`` corrupts the relu backward to prove the harness
    actually detects wrong gradients."""
    if inject_bad_op:
        original = ad.relu

        def bad_relu(a):
            t = original(a)
            good = t._backward

            def bwd(g):
                good(g * 2.0)

            t._backward = bwd
            return t

        ad.relu = bad_relu
    try:
        reports = op_checks() + loss_checks() + model_check()
    finally:
        if inject_bad_op:
            ad.relu = original
    return all(r.ok for r in reports), reports
