"""Dataset generators and encoders: sliding-tile puzzle object sets,
the four permutation-training scenarios, dummy padding for variable-size
sets, and n-hop neighbor clause datasets over an edge-list graph."""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "N_PUZZLE_STATES",
    "PUZZLE_SEGMENTS",
    "all_states",
    "sample_states",
    "encode_puzzle_state",
    "encode_states",
    "drop_elements",
    "pad_with_dummies",
    "ScenarioConfig",
    "make_scenario",
    "KnowledgeGraph",
    "load_edge_list",
    "synthetic_countries_graph",
    "ClauseExample",
    "enumerate_clauses",
    "encode_clauses",
    "decode_term",
    "decode_head",
    "rule_segments",
    "save_object_sets",
    "load_object_sets",
    "export_csv",
]

# ---------------------------------------------------------------------------
# 8-puzzle states

N_PUZZLE_STATES = 362880  # 9!

# one row per tile: 9-way tile id, 3-way x, 3-way y, all one-hot
PUZZLE_SEGMENTS = ((9, "softmax"), (3, "softmax"), (3, "softmax"))


def all_states():
    """Exhaustive enumeration of the 362880 tile configurations.
    Each state maps grid position -> tile id."""
    return itertools.permutations(range(9))


def _perm_from_index(idx: int, n: int = 9) -> tuple:
    """Lehmer-code unranking: the idx-th permutation in lexicographic
    order. Lets us sample without replacement by sampling indices."""
    pool = list(range(n))
    out = []
    for k in range(n - 1, -1, -1):
        f = _FACT[k]
        out.append(pool.pop(idx // f))
        idx %= f
    return tuple(out)


_FACT = [1] * 10
for _i in range(1, 10):
    _FACT[_i] = _FACT[_i - 1] * _i


def sample_states(count: int, seed: int) -> list[tuple]:
    """Distinct states sampled uniformly without replacement."""
    if count > N_PUZZLE_STATES:
        raise ValueError("cannot sample %d distinct states out of %d"
                         % (count, N_PUZZLE_STATES))
    rng = np.random.default_rng(seed)
    indices = rng.permutation(N_PUZZLE_STATES)[:count]
    return [_perm_from_index(int(i)) for i in indices]


def encode_puzzle_state(state) -> np.ndarray:
    """9x15 binary object set: row t describes tile t by its one-hot id
    and the one-hot x/y coordinates of the position holding it."""
    state = tuple(state)
    if sorted(state) != list(range(9)):
        raise ValueError("state must be a permutation of tiles 0..8")
    out = np.zeros((9, 15))
    for pos, tile in enumerate(state):
        out[tile, tile] = 1.0
        out[tile, 9 + pos % 3] = 1.0
        out[tile, 12 + pos // 3] = 1.0
    return out


def encode_states(states) -> np.ndarray:
    return np.stack([encode_puzzle_state(s) for s in states])


def drop_elements(states, seed: int) -> list[np.ndarray]:
    """Variable-size sets: encode each state and drop 0-4 random rows.

    Kept-size buckets follow a halving scheme: 1/2 of the states keep all
    9 rows, 1/4 keep 8, 1/8 keep 7, 1/16 keep 6, and the residual 1/16
    keeps 5.
    """
    rng = np.random.default_rng(seed)
    out = []
    for s in states:
        u = rng.random()
        if u < 0.5:
            keep = 9
        elif u < 0.75:
            keep = 8
        elif u < 0.875:
            keep = 7
        elif u < 0.9375:
            keep = 6
        else:
            keep = 5
        enc = encode_puzzle_state(s)
        rows = np.sort(rng.permutation(9)[:keep])
        out.append(enc[rows])
    return out


def pad_with_dummies(X: np.ndarray, target_n: int) -> np.ndarray:
    """Normalize a k x F set to target_n x (F+1) by prepending a dummy
    flag column and filling the blanks with distinct filler rows.

    Real rows get flag 0; each dummy row reads, as a bit string, flag 1
    followed by an F-bit binary counter (100...0, 100...1, ...), so all
    padded rows stay pairwise distinct.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("expected a 2-D object set")
    k, f = X.shape
    if k > target_n:
        raise ValueError("set has %d rows, larger than target %d" % (k, target_n))
    n_dummy = target_n - k
    if n_dummy > 2 ** f:
        raise ValueError("dummy space exhausted: need %d fillers, F=%d allows %d"
                         % (n_dummy, f, 2 ** f))
    out = np.zeros((target_n, f + 1))
    out[:k, 1:] = X
    for d in range(n_dummy):
        row = k + d
        out[row, 0] = 1.0
        for bit in range(f):
            out[row, 1 + bit] = (d >> (f - 1 - bit)) & 1
    return out


# ---------------------------------------------------------------------------
# training scenarios

@dataclass
class ScenarioConfig:
    """One of the four input/target ordering regimes.

    (1) both fixed, (2) input shuffled, (3) target shuffled, (4) both
    shuffled independently. Whenever any shuffling is on the dataset is
    repeated ``repetition`` times and the trainer divides its epoch budget
    by the same factor.
    """

    input_order: str = "fixed"
    target_order: str = "fixed"
    repetition: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.input_order not in ("fixed", "random"):
            raise ValueError("input_order must be 'fixed' or 'random'")
        if self.target_order not in ("fixed", "random"):
            raise ValueError("target_order must be 'fixed' or 'random'")
        if self.repetition < 1:
            raise ValueError("repetition must be >= 1")
        if self.input_order == "fixed" and self.target_order == "fixed" \
                and self.repetition != 1:
            raise ValueError("repetition must be 1 when both orders are fixed")

    @property
    def epoch_divisor(self) -> int:
        return self.repetition

    @classmethod
    def preset(cls, number: int, seed: int = 0) -> "ScenarioConfig":
        orders = {1: ("fixed", "fixed"), 2: ("random", "fixed"),
                  3: ("fixed", "random"), 4: ("random", "random")}
        if number not in orders:
            raise ValueError("scenario number must be 1..4")
        inp, tgt = orders[number]
        rep = 1 if (inp, tgt) == ("fixed", "fixed") else 5
        return cls(input_order=inp, target_order=tgt, repetition=rep, seed=seed)


def make_scenario(sets: np.ndarray, cfg: ScenarioConfig):
    """Expand a (M, N, F) dataset into (inputs, targets) pairs under the
    configured ordering regime. Row content is never altered, only
    permuted, so every pair stays multiset-equal."""
    sets = np.asarray(sets, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    m, n, _ = sets.shape
    inputs, targets = [], []
    for _ in range(cfg.repetition):
        for i in range(m):
            x = sets[i]
            inp = x[rng.permutation(n)] if cfg.input_order == "random" else x
            tgt = x[rng.permutation(n)] if cfg.target_order == "random" else x
            inputs.append(inp)
            targets.append(tgt)
    return np.stack(inputs), np.stack(targets)


# ---------------------------------------------------------------------------
# knowledge graph and n-hop neighbor clauses

@dataclass
class KnowledgeGraph:
    """Undirected neighbor graph with dense entity ids."""

    names: list = field(default_factory=list)
    adj: list = field(default_factory=list)

    @property
    def n_entities(self) -> int:
        return len(self.names)

    def entity_id(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError("unknown entity %r" % (name,))

    def add_entity(self, name: str) -> int:
        self.names.append(name)
        self.adj.append(set())
        return len(self.names) - 1

    def add_edge(self, a: int, b: int) -> None:
        if a == b:
            raise ValueError("self-loops are not allowed")
        self.adj[a].add(b)
        self.adj[b].add(a)

    def n_edges(self) -> int:
        return sum(len(s) for s in self.adj) // 2


def load_edge_list(path) -> KnowledgeGraph:
    """Read a text edge list: one "entityA entityB" pair per line,
    '#' comments and blank lines skipped. Entity ids follow first
    appearance; duplicate edges are idempotent; self-loops are rejected."""
    g = KnowledgeGraph()
    index: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError("%s:%d: expected two entity names, got %r"
                                 % (path, lineno, raw.rstrip("\n")))
            ids = []
            for name in parts:
                if name not in index:
                    index[name] = g.add_entity(name)
                ids.append(index[name])
            if ids[0] == ids[1]:
                raise ValueError("%s:%d: self-loop %r" % (path, lineno, parts[0]))
            g.add_edge(ids[0], ids[1])
    return g


def synthetic_countries_graph(n_entities: int = 163, seed: int = 0,
                              k_nearest: int = 4) -> KnowledgeGraph:
    """Deterministic stand-in for a real country adjacency: a random
    geometric graph built by connecting each point to its k nearest
    neighbors in the unit square."""
    rng = np.random.default_rng(seed)
    pts = rng.random((n_entities, 2))
    g = KnowledgeGraph()
    for i in range(n_entities):
        g.add_entity("c%03d" % i)
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    for i in range(n_entities):
        for j in np.argsort(d2[i])[:k_nearest]:
            g.add_edge(i, int(j))
    return g


@dataclass(frozen=True)
class ClauseExample:
    """A ground horn clause: head neighborN(e0..en) with the body
    { neighborOf(e_k, e_{k+1}) } as an order-free set of terms."""

    entities: tuple
    n_graph_entities: int

    @property
    def n(self) -> int:
        return len(self.entities) - 1

    def head_vector(self) -> np.ndarray:
        c = self.n_graph_entities
        vec = np.zeros(2 + c * (self.n + 1))
        vec[0] = 1.0  # head predicate slot
        for i, e in enumerate(self.entities):
            vec[2 + i * c + e] = 1.0
        return vec

    def body_matrix(self) -> np.ndarray:
        c = self.n_graph_entities
        body = np.zeros((self.n, 2 + 2 * c))
        for k in range(self.n):
            body[k, 1] = 1.0  # body predicate slot
            body[k, 2 + self.entities[k]] = 1.0
            body[k, 2 + c + self.entities[k + 1]] = 1.0
        return body


def enumerate_clauses(g: KnowledgeGraph, n: int) -> list[ClauseExample]:
    """All simple n-hop walks (e0..en) with consecutive edges in g,
    in both directions, as ground clause examples."""
    if n < 2:
        raise ValueError("hop count must be >= 2")
    if g.n_entities == 0:
        raise ValueError("graph is empty")
    out = []

    def extend(walk):
        if len(walk) == n + 1:
            out.append(ClauseExample(tuple(walk), g.n_entities))
            return
        for nxt in sorted(g.adj[walk[-1]]):
            if nxt not in walk:
                walk.append(nxt)
                extend(walk)
                walk.pop()

    for start in range(g.n_entities):
        extend([start])
    return out


def encode_clauses(clauses) -> tuple[np.ndarray, np.ndarray]:
    """Stack clause encodings into a head matrix and a body array."""
    heads = np.stack([c.head_vector() for c in clauses])
    bodies = np.stack([c.body_matrix() for c in clauses])
    return heads, bodies


def rule_segments(n_entities: int):
    """Activation plan of one body-term row: predicate, argument 1,
    argument 2, each one-hot."""
    return ((2, "softmax"), (n_entities, "softmax"), (n_entities, "softmax"))


def decode_term(row: np.ndarray, n_entities: int) -> tuple:
    """(predicate, arg1, arg2) by per-block argmax."""
    row = np.asarray(row)
    c = n_entities
    return (int(np.argmax(row[:2])),
            int(np.argmax(row[2:2 + c])),
            int(np.argmax(row[2 + c:2 + 2 * c])))


def decode_head(vec: np.ndarray, n_entities: int) -> tuple:
    """Entity ids of a head vector by per-block argmax."""
    vec = np.asarray(vec)
    c = n_entities
    n_args = (vec.size - 2) // c
    return tuple(int(np.argmax(vec[2 + i * c:2 + (i + 1) * c]))
                 for i in range(n_args))


# ---------------------------------------------------------------------------
# on-disk containers

_SETD_MAGIC = b"SETD"
_SETD_VERSION = 1


def save_object_sets(path, sets: np.ndarray) -> None:
    """Binary container: magic SETD, version, count, N, F (u32 LE), then
    count*N*F little-endian float32 values row-major."""
    sets = np.asarray(sets)
    if sets.ndim != 3:
        raise ValueError("expected (count, N, F) array")
    count, n, f = sets.shape
    with open(path, "wb") as fh:
        fh.write(_SETD_MAGIC)
        fh.write(struct.pack("<IIII", _SETD_VERSION, count, n, f))
        fh.write(sets.astype("<f4").tobytes())


def load_object_sets(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SETD_MAGIC:
            raise ValueError("%s: not a SETD file" % (path,))
        version, count, n, f = struct.unpack("<IIII", fh.read(16))
        if version != _SETD_VERSION:
            raise ValueError("%s: unsupported SETD version %d" % (path, version))
        data = np.frombuffer(fh.read(count * n * f * 4), dtype="<f4")
    if data.size != count * n * f:
        raise ValueError("%s: truncated SETD payload" % (path,))
    return data.astype(np.float64).reshape(count, n, f)


def export_csv(path, sets: np.ndarray) -> None:
    """Text mirror of the binary container: one element row per line,
    blank line between sets."""
    sets = np.asarray(sets)
    with open(path, "w", encoding="utf-8") as fh:
        for s in sets:
            for row in s:
                fh.write(",".join("%g" % v for v in row))
                fh.write("\n")
            fh.write("\n")
