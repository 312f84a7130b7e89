"""Evaluation metrics: exact set-reconstruction success and rule-body
answer accuracy, plus the report container the grid runner emits."""
from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .datasets import decode_term

__all__ = [
    "round_object_set",
    "reconstruction_success",
    "reconstruction_success_ratio",
    "rule_accuracy",
    "EvalReport",
    "grid_csv",
    "grid_markdown",
]


def round_object_set(Y: np.ndarray, segments=None) -> np.ndarray:
    """Round a probability matrix to binary: argmax within each softmax
    segment, 0.5 threshold within sigmoid segments. With no segment plan
    every feature is thresholded."""
    Y = np.asarray(Y, dtype=np.float64)
    if segments is None:
        return (Y >= 0.5).astype(np.float64)
    out = np.zeros_like(Y)
    start = 0
    for length, activation in segments:
        block = Y[:, start:start + length]
        if activation == "softmax":
            idx = np.argmax(block, axis=1)
            out[np.arange(Y.shape[0]), start + idx] = 1.0
        elif activation == "sigmoid":
            out[:, start:start + length] = (block >= 0.5)
        else:
            raise ValueError("unknown activation %r" % (activation,))
        start += length
    if start != Y.shape[1]:
        raise ValueError("segments cover %d of %d features" % (start, Y.shape[1]))
    return out


def _row_multiset(m: np.ndarray) -> Counter:
    return Counter(row.astype(np.int8).tobytes() for row in m)


def reconstruction_success(X: np.ndarray, Y: np.ndarray, segments=None) -> bool:
    """True iff the rounded output equals the target as a multiset of
    rows, i.e. every target row is matched and the match is a bijection."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape:
        raise ValueError("shape mismatch: %r vs %r" % (X.shape, Y.shape))
    return _row_multiset(X) == _row_multiset(round_object_set(Y, segments))


def reconstruction_success_ratio(Xs, Ys, segments=None) -> float:
    total = 0
    good = 0
    for x, y in zip(Xs, Ys):
        total += 1
        good += reconstruction_success(x, y, segments)
    return good / total if total else 0.0


def rule_accuracy(bodies, outputs, n_entities: int) -> float:
    """Fraction of clauses where every target body term appears among the
    argmax-decoded output terms, order ignored."""
    total = 0
    good = 0
    for body, out in zip(bodies, outputs):
        total += 1
        decoded = {decode_term(row, n_entities) for row in np.asarray(out)}
        wanted = [decode_term(row, n_entities) for row in np.asarray(body)]
        good += all(term in decoded for term in wanted)
    return good / total if total else 0.0


LOSS_ROW_ORDER = ("ce", "sce", "avg", "hausdorff")
LOSS_ROW_LABELS = {"ce": "(a) flattened CE", "sce": "(b) set CE",
                   "avg": "(c) set average", "hausdorff": "(d) Hausdorff"}


@dataclass
class EvalReport:
    """Outcome of one trained run on one evaluation split."""

    loss: str
    scenario: int
    seed: int
    split: str
    success_ratio: float

    def csv_row(self) -> str:
        return "%s,%d,%d,%s,%.6f" % (self.loss, self.scenario, self.seed,
                                     self.split, self.success_ratio)


def grid_csv(reports) -> str:
    out = io.StringIO()
    out.write("loss,scenario,seed,split,success_ratio\n")
    for r in sorted(reports, key=lambda r: (LOSS_ROW_ORDER.index(r.loss),
                                            r.scenario, r.seed)):
        out.write(r.csv_row() + "\n")
    return out.getvalue()


def grid_markdown(reports, scenarios=(1, 2, 3, 4)) -> str:
    """Markdown table, loss kinds as rows and scenarios as columns, each
    cell showing best and mean +/- std over the runs."""
    by_cell: dict[tuple, list] = {}
    for r in reports:
        by_cell.setdefault((r.loss, r.scenario), []).append(r.success_ratio)
    out = io.StringIO()
    out.write("| loss | " + " | ".join("(%d)" % s for s in scenarios) + " |\n")
    out.write("|" + "---|" * (len(scenarios) + 1) + "\n")
    for loss in LOSS_ROW_ORDER:
        cells = []
        for s in scenarios:
            vals = by_cell.get((loss, s))
            if not vals:
                cells.append("-")
                continue
            cells.append("%.2f (%.2f±%.2f)"
                         % (max(vals), float(np.mean(vals)), float(np.std(vals))))
        out.write("| %s | %s |\n" % (LOSS_ROW_LABELS[loss], " | ".join(cells)))
    return out.getvalue()
