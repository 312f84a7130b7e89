"""Networks and training: the permutation-invariant set autoencoder, the
encoder-free rule-body predictor, the Adam training loop, and the binary
checkpoint container.

Both models are exposed as sklearn-style estimators (fit / predict /
transform, hyperparameters in ``__init__``) on top of small "core"
classes that own the raw parameter arrays and the tape-building forward
pass.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Tape
from .losses import DEFAULT_EPS, LossKind, set_loss
from .metrics import reconstruction_success_ratio, rule_accuracy

__all__ = [
    "TrainConfig",
    "NumericalError",
    "AutoencoderCore",
    "RuleCore",
    "Adam",
    "fit_loop",
    "SetAutoencoder",
    "RuleClausePredictor",
    "save_checkpoint",
    "load_checkpoint",
]


class NumericalError(RuntimeError):
    """Raised when a forward pass produces NaN/inf; names the first
    offending op so the failure is actionable."""


@dataclass
class TrainConfig:
    loss: LossKind = LossKind.SCE
    epochs: int = 30
    batch_size: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    temperature_start: float = 5.0
    temperature_end: float = 0.7
    lr_decay: float = 1.0  # final/initial learning-rate ratio
    seed: int = 0
    validation_fraction: float = 0.1
    eps: float = DEFAULT_EPS
    average_reduce: str = "mean"

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.temperature_end <= 0:
            raise ValueError("final temperature must be positive")

    def temperature_at(self, epoch: int) -> float:
        """Exponential anneal from start to end over the epoch budget."""
        if self.epochs <= 1:
            return self.temperature_end
        frac = epoch / (self.epochs - 1)
        return self.temperature_start * (self.temperature_end /
                                         self.temperature_start) ** frac

    def learning_rate_at(self, epoch: int) -> float:
        """Exponential anneal so the last epoch runs at
        learning_rate * lr_decay, independent of the epoch count."""
        if self.epochs <= 1:
            return self.learning_rate
        frac = epoch / (self.epochs - 1)
        return self.learning_rate * self.lr_decay ** frac


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _dense(lifted, name, h):
    return ad.add(ad.matmul(h, lifted[name + ".W"]), lifted[name + ".b"])


def _activate_segments(t, segments):
    parts = []
    start = 0
    for length, activation in segments:
        block = ad.slice_cols(t, start, start + length)
        if activation == "softmax":
            parts.append(ad.softmax(block, axis=1))
        elif activation == "sigmoid":
            parts.append(ad.sigmoid(block))
        else:
            raise ValueError("unknown activation %r" % (activation,))
        start += length
    if start != t.shape[1]:
        raise ValueError("segments cover %d of %d output features"
                         % (start, t.shape[1]))
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)


class _Module:
    """Shared parameter bookkeeping for the model cores."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}

    def _add_dense(self, rng, name, fan_in, fan_out):
        self.params[name + ".W"] = _glorot(rng, fan_in, fan_out)
        self.params[name + ".b"] = np.zeros((1, fan_out))

    def _add_batchnorm(self, name, width):
        self.params[name + ".gamma"] = np.ones((1, width))
        self.params[name + ".beta"] = np.zeros((1, width))
        self.state[name + ".mean"] = np.zeros((1, width))
        self.state[name + ".var"] = np.ones((1, width))

    def lift(self, tape: Tape) -> dict:
        return {k: tape.leaf(v, name=k) for k, v in self.params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(("state/" + k, v) for k, v in self.state.items())
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.params[k] = np.array(arrays[k])
        for k in self.state:
            self.state[k] = np.array(arrays["state/" + k])

    def refresh_batchnorm(self, inputs, temperature=None, max_sets=1000):
        """Overwrite the running statistics with exact batch statistics
        from one deterministic full pass; keeps eval consistent with the
        short training runs where momentum-0.99 averages lag behind."""
        if not self.use_batchnorm:
            return
        batch = np.asarray(inputs, dtype=np.float64)[:max_sets]
        tape = Tape()
        lifted = self.lift(tape)
        self.forward(tape, lifted, batch, mode="refresh", rng=None,
                     temperature=temperature)

    def _decoder_block(self, tape, lifted, name, h, mode, rng):
        # mode: "train" (noise on, batch stats), "eval" (running stats),
        # "refresh" (batch stats overwrite the running stats, no noise)
        h = ad.relu(_dense(lifted, name, h))
        if self.use_batchnorm:
            h = ad.batchnorm(h, lifted[name + ".bn.gamma"],
                             lifted[name + ".bn.beta"],
                             self.state[name + ".bn.mean"],
                             self.state[name + ".bn.var"],
                             momentum=0.0 if mode == "refresh" else 0.99,
                             training=mode != "eval")
        if self.dropout_rate > 0:
            h = ad.dropout(h, self.dropout_rate, rng, training=mode == "train")
        return h


class AutoencoderCore(_Module):
    """Deep Sets encoder (per-element stack, sum pooling, post-pool stack,
    latent layer) with a fully-connected decoder producing one activated
    N x F object set per input set."""

    def __init__(self, n_elements, n_features, segments, width=300,
                 latent_units=300, latent_mode="none",
                 use_batchnorm=False, dropout_rate=0.0, seed=0):
        super().__init__()
        if latent_mode not in ("gumbel-binary", "sigmoid", "none"):
            raise ValueError("unknown latent mode %r" % (latent_mode,))
        self.n_elements = n_elements
        self.n_features = n_features
        self.segments = tuple(segments)
        self.width = width
        self.latent_units = latent_units
        self.latent_mode = latent_mode
        self.use_batchnorm = use_batchnorm
        self.dropout_rate = dropout_rate
        rng = np.random.default_rng(seed)
        self._add_dense(rng, "phi1", n_features, width)
        self._add_dense(rng, "phi2", width, width)
        self._add_dense(rng, "rho1", width, width)
        self._add_dense(rng, "rho2", width, width)
        self._add_dense(rng, "latent", width, latent_units)
        self._add_dense(rng, "dec1", latent_units, width)
        self._add_dense(rng, "dec2", width, width)
        self._add_dense(rng, "out", width, n_elements * n_features)
        if use_batchnorm:
            self._add_batchnorm("dec1.bn", width)
            self._add_batchnorm("dec2.bn", width)

    @property
    def group_size(self) -> int:
        return self.n_elements

    def _check_batch(self, batch):
        if batch.ndim != 3 or batch.shape[1:] != (self.n_elements,
                                                  self.n_features):
            raise ValueError("expected batch of shape (B, %d, %d), got %r"
                             % (self.n_elements, self.n_features, batch.shape))

    def encode_logits(self, tape, lifted, batch):
        self._check_batch(batch)
        b = batch.shape[0]
        flat = tape.constant(batch.reshape(b * self.n_elements,
                                           self.n_features))
        h = ad.relu(_dense(lifted, "phi1", flat))
        h = ad.relu(_dense(lifted, "phi2", h))
        pooled = ad.sum_pool(h, self.n_elements)
        h = ad.relu(_dense(lifted, "rho1", pooled))
        h = ad.relu(_dense(lifted, "rho2", h))
        return _dense(lifted, "latent", h)

    def latent_code(self, logits, mode, rng, temperature):
        if self.latent_mode == "gumbel-binary":
            return ad.binary_concrete_sample(logits, temperature, rng,
                                             training=mode == "train")
        if self.latent_mode == "sigmoid":
            return ad.sigmoid(logits)
        return logits

    def decode(self, tape, lifted, z, mode, rng):
        b = z.shape[0]
        h = self._decoder_block(tape, lifted, "dec1", z, mode, rng)
        h = self._decoder_block(tape, lifted, "dec2", h, mode, rng)
        h = _dense(lifted, "out", h)
        h = ad.reshape(h, b * self.n_elements, self.n_features)
        return _activate_segments(h, self.segments)

    def forward(self, tape, lifted, batch, mode, rng, temperature):
        """Full pass; returns the activated (B*N) x F output tensor."""
        logits = self.encode_logits(tape, lifted, batch)
        z = self.latent_code(logits, mode, rng, temperature)
        return self.decode(tape, lifted, z, mode, rng)

    def predict_sets(self, batch, temperature, chunk=200) -> np.ndarray:
        """Deterministic eval-mode reconstruction, (M, N, F)."""
        self._check_batch(batch)
        outs = []
        for start in range(0, batch.shape[0], chunk):
            part = batch[start:start + chunk]
            tape = Tape()
            lifted = self.lift(tape)
            y = self.forward(tape, lifted, part, mode="eval", rng=None,
                             temperature=temperature)
            outs.append(y.value.reshape(part.shape[0], self.n_elements,
                                        self.n_features))
        return np.concatenate(outs)

    def encode_sets(self, batch, temperature, chunk=200) -> np.ndarray:
        """Deterministic eval-mode latent codes, (M, latent_units)."""
        outs = []
        for start in range(0, batch.shape[0], chunk):
            part = batch[start:start + chunk]
            tape = Tape()
            lifted = self.lift(tape)
            logits = self.encode_logits(tape, lifted, part)
            z = self.latent_code(logits, mode="eval", rng=None,
                                 temperature=temperature)
            outs.append(np.array(z.value))
        return np.concatenate(outs)


class RuleCore(_Module):
    """Encoder-free predictor: a head vector in, an activated n x F matrix
    of body terms out."""

    def __init__(self, head_dim, n_terms, segments, width=400,
                 use_batchnorm=True, dropout_rate=0.5, seed=0):
        super().__init__()
        self.head_dim = head_dim
        self.n_terms = n_terms
        self.segments = tuple(segments)
        self.term_dim = sum(length for length, _ in segments)
        self.width = width
        self.use_batchnorm = use_batchnorm
        self.dropout_rate = dropout_rate
        rng = np.random.default_rng(seed)
        self._add_dense(rng, "dec1", head_dim, width)
        self._add_dense(rng, "dec2", width, width)
        self._add_dense(rng, "out", width, n_terms * self.term_dim)
        if use_batchnorm:
            self._add_batchnorm("dec1.bn", width)
            self._add_batchnorm("dec2.bn", width)

    @property
    def group_size(self) -> int:
        return self.n_terms

    def forward(self, tape, lifted, batch, mode, rng, temperature=None):
        if batch.ndim != 2 or batch.shape[1] != self.head_dim:
            raise ValueError("expected batch of shape (B, %d), got %r"
                             % (self.head_dim, batch.shape))
        b = batch.shape[0]
        h = tape.constant(batch)
        h = self._decoder_block(tape, lifted, "dec1", h, mode, rng)
        h = self._decoder_block(tape, lifted, "dec2", h, mode, rng)
        h = _dense(lifted, "out", h)
        h = ad.reshape(h, b * self.n_terms, self.term_dim)
        return _activate_segments(h, self.segments)

    def predict_bodies(self, batch, chunk=200) -> np.ndarray:
        outs = []
        for start in range(0, batch.shape[0], chunk):
            part = batch[start:start + chunk]
            tape = Tape()
            lifted = self.lift(tape)
            y = self.forward(tape, lifted, part, mode="eval", rng=None)
            outs.append(y.value.reshape(part.shape[0], self.n_terms,
                                        self.term_dim))
        return np.concatenate(outs)


class Adam(object):
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"adam/t": np.array([[float(self.t)]])}
        out.update(("adam/m/" + k, v) for k, v in self.m.items())
        out.update(("adam/v/" + k, v) for k, v in self.v.items())
        return out


def _batch_loss(kind, out_t, targets, group, eps, reduce):
    """Mean per-sample set loss over a batch whose outputs are stacked as
    consecutive row groups of ``group`` rows."""
    b = targets.shape[0]
    if kind is LossKind.FLATTENED_CE:
        flat = targets.reshape(b * group, -1)
        total = set_loss(kind, flat, out_t, eps)
    else:
        total = None
        for i in range(b):
            y_i = ad.slice_rows(out_t, i * group, (i + 1) * group)
            l_i = set_loss(kind, targets[i], y_i, eps, reduce=reduce)
            total = l_i if total is None else ad.add(total, l_i)
    return ad.mul(total, 1.0 / b)


def _check_finite(tape, loss_t):
    if not np.isfinite(loss_t.value).all():
        node = tape.first_nonfinite()
        raise NumericalError("non-finite loss; first offending op: %s"
                             % (node.op if node is not None else "unknown"))


def fit_loop(core, inputs, targets, config: TrainConfig):
    """Adam training with a held-out validation slice for best-epoch
    selection. Deterministic given config.seed; returns the per-epoch
    trace and leaves the best parameters in ``core``."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    m = inputs.shape[0]
    if m == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(config.seed)
    n_val = int(round(m * config.validation_fraction)) if m > 1 else 0
    order = rng.permutation(m)
    val_idx, train_idx = order[:n_val], order[n_val:]
    opt = Adam(core.params, lr=config.learning_rate, beta1=config.beta1,
               beta2=config.beta2, eps=config.adam_eps)
    history = []
    best_val = np.inf
    best_snapshot = None
    group = core.group_size
    for epoch in range(config.epochs):
        temperature = config.temperature_at(epoch)
        opt.lr = config.learning_rate_at(epoch)
        epoch_order = train_idx[rng.permutation(len(train_idx))]
        train_loss = 0.0
        n_batches = 0
        for start in range(0, len(epoch_order), config.batch_size):
            idx = epoch_order[start:start + config.batch_size]
            tape = Tape()
            lifted = core.lift(tape)
            out = core.forward(tape, lifted, inputs[idx], mode="train",
                               rng=rng, temperature=temperature)
            loss_t = _batch_loss(config.loss, out, targets[idx], group,
                                 config.eps, config.average_reduce)
            _check_finite(tape, loss_t)
            tape.backward(loss_t)
            opt.step(core.params, {k: lifted[k].grad for k in core.params})
            train_loss += loss_t.value.item()
            n_batches += 1
        train_loss /= max(n_batches, 1)
        if len(val_idx):
            core.refresh_batchnorm(inputs[train_idx[:500]],
                                   temperature=config.temperature_end)
            tape = Tape()
            lifted = core.lift(tape)
            out = core.forward(tape, lifted, inputs[val_idx], mode="eval",
                               rng=None, temperature=config.temperature_end)
            val_t = _batch_loss(config.loss, out, targets[val_idx], group,
                                config.eps, config.average_reduce)
            val_loss = val_t.value.item()
        else:
            val_loss = train_loss
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "temperature": temperature})
        if val_loss <= best_val:
            best_val = val_loss
            best_snapshot = (copy.deepcopy(core.params),
                             copy.deepcopy(core.state))
    if best_snapshot is not None:
        core.params, core.state = best_snapshot
    core.refresh_batchnorm(inputs[train_idx[:1000]],
                           temperature=config.temperature_end)
    return history


# ---------------------------------------------------------------------------
# estimator facades

class SetAutoencoder(BaseEstimator):
    """Permutation-invariant set autoencoder.

    ``fit(X, y)`` takes object sets as a (M, N, F) array; ``y`` defaults
    to ``X`` and may carry independently permuted targets. ``transform``
    returns latent codes, ``predict`` the reconstructed probability sets,
    and ``score`` the exact reconstruction success ratio.
    """

    def __init__(self, loss="sce", width=300, latent_units=300, epochs=30,
                 batch_size=4, learning_rate=1e-3, latent_mode="none",
                 use_batchnorm=False, dropout_rate=0.0,
                 temperature_start=5.0, temperature_end=0.7, lr_decay=0.1,
                 beta1=0.9, beta2=0.99, validation_fraction=0.0,
                 eps=DEFAULT_EPS, segments=None, random_state=0):
        self.loss = loss
        self.width = width
        self.latent_units = latent_units
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.latent_mode = latent_mode
        self.use_batchnorm = use_batchnorm
        self.dropout_rate = dropout_rate
        self.temperature_start = temperature_start
        self.temperature_end = temperature_end
        self.lr_decay = lr_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.validation_fraction = validation_fraction
        self.eps = eps
        self.segments = segments
        self.random_state = random_state

    def _config(self):
        return TrainConfig(loss=LossKind.from_string(self.loss),
                           epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate,
                           temperature_start=self.temperature_start,
                           temperature_end=self.temperature_end,
                           lr_decay=self.lr_decay,
                           beta1=self.beta1, beta2=self.beta2,
                           seed=self.random_state,
                           validation_fraction=self.validation_fraction,
                           eps=self.eps)

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        targets = X if y is None else np.asarray(y, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError("expected (M, N, F) object sets")
        _, n, f = X.shape
        segments = (tuple(self.segments) if self.segments is not None
                    else ((f, "sigmoid"),))
        self.core_ = AutoencoderCore(
            n, f, segments, width=self.width, latent_units=self.latent_units,
            latent_mode=self.latent_mode, use_batchnorm=self.use_batchnorm,
            dropout_rate=self.dropout_rate, seed=self.random_state)
        self.segments_ = segments
        self.history_ = fit_loop(self.core_, X, targets, self._config())
        return self

    def predict(self, X):
        return self.core_.predict_sets(np.asarray(X, dtype=np.float64),
                                       self.temperature_end)

    def transform(self, X):
        return self.core_.encode_sets(np.asarray(X, dtype=np.float64),
                                      self.temperature_end)

    def score(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        targets = X if y is None else np.asarray(y, dtype=np.float64)
        return reconstruction_success_ratio(targets, self.predict(X),
                                            self.segments_)


class RuleClausePredictor(BaseEstimator):
    """Horn-clause body predictor: head encoding in, a set of body term
    encodings out. ``score`` is the order-free answer accuracy."""

    def __init__(self, loss="sce", width=400, epochs=30, batch_size=100,
                 learning_rate=1e-3, use_batchnorm=True, dropout_rate=0.5,
                 lr_decay=1.0, validation_fraction=0.1, eps=DEFAULT_EPS,
                 random_state=0):
        self.loss = loss
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.use_batchnorm = use_batchnorm
        self.dropout_rate = dropout_rate
        self.lr_decay = lr_decay
        self.validation_fraction = validation_fraction
        self.eps = eps
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or y.ndim != 3 or X.shape[0] != y.shape[0]:
            raise ValueError("expected heads (M, H) and bodies (M, n, F)")
        _, n_terms, term_dim = y.shape
        n_entities = (term_dim - 2) // 2
        if 2 + 2 * n_entities != term_dim:
            raise ValueError("body term width %d is not 2 + 2*entities"
                             % (term_dim,))
        from .datasets import rule_segments
        self.n_entities_ = n_entities
        self.core_ = RuleCore(X.shape[1], n_terms,
                              rule_segments(n_entities), width=self.width,
                              use_batchnorm=self.use_batchnorm,
                              dropout_rate=self.dropout_rate,
                              seed=self.random_state)
        config = TrainConfig(loss=LossKind.from_string(self.loss),
                             epochs=self.epochs, batch_size=self.batch_size,
                             learning_rate=self.learning_rate,
                             lr_decay=self.lr_decay,
                             seed=self.random_state,
                             validation_fraction=self.validation_fraction,
                             eps=self.eps)
        self.history_ = fit_loop(self.core_, X, y, config)
        return self

    def predict(self, X):
        return self.core_.predict_bodies(np.asarray(X, dtype=np.float64))

    def score(self, X, y):
        return rule_accuracy(np.asarray(y), self.predict(X), self.n_entities_)


# ---------------------------------------------------------------------------
# checkpoint container

_SETM_MAGIC = b"SETM"
_SETM_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    """Named-array container: magic SETM, version u32, array count u32,
    then per array (name length u32, utf-8 name, rows u32, cols u32,
    little-endian float64 data). Also used for optimizer state."""
    with open(path, "wb") as fh:
        fh.write(_SETM_MAGIC)
        fh.write(struct.pack("<II", _SETM_VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.atleast_2d(np.asarray(arrays[name], dtype=np.float64))
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    arrays = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _SETM_MAGIC:
            raise ValueError("%s: not a SETM file" % (path,))
        version, count = struct.unpack("<II", fh.read(8))
        if version != _SETM_VERSION:
            raise ValueError("%s: unsupported SETM version %d" % (path, version))
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            rows, cols = struct.unpack("<II", fh.read(8))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
            if data.size != rows * cols:
                raise ValueError("%s: truncated array %r" % (path, name))
            arrays[name] = data.astype(np.float64).reshape(rows, cols)
    return arrays
