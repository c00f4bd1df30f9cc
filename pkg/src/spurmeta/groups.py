"""Class-attribute group indexes, spuriousness scoring and sampling weights.

A group (k, a) collects the samples of class k whose incidence row contains
attribute a; its complement holds the remaining samples of class k.  The
spuriousness score of the pair compares classifier accuracy on the two
sides, under one of five metric variants.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .corpus import AttributeIncidence

METRICS = ("tanh-abs-log-ratio", "abs-delta", "delta", "tanh-log-ratio", "constant")
RATIO_METRICS = ("tanh-abs-log-ratio", "tanh-log-ratio")

# Score assigned when the member or complement set is empty.  It is also the
# neutral point of the signed metrics, which have no natural range minimum.
ALPHA = 0.0


class GroupError(Exception):
    """Inconsistent labels/incidence or an unusable group."""


class GroupIndex:
    """Immutable member/complement partition per (class, attribute)."""

    def __init__(self, labels: dict[str, int], incidence: AttributeIncidence,
                 classes: list[int]):
        self.classes = tuple(sorted(classes))
        self.n_attributes = incidence.n_attributes
        class_set = set(self.classes)
        self._class_samples: dict[int, tuple[str, ...]] = {k: () for k in self.classes}
        by_class: dict[int, list[str]] = {k: [] for k in self.classes}
        for sid in sorted(labels):
            y = labels[sid]
            if y not in class_set:
                raise GroupError(f"sample {sid!r} has label {y} outside classes {self.classes}")
            if sid not in incidence.rows:
                raise GroupError(f"sample {sid!r} has no incidence row")
            by_class[y].append(sid)
        self._class_samples = {k: tuple(v) for k, v in by_class.items()}
        members: dict[tuple[int, int], list[str]] = {}
        for k in self.classes:
            for sid in self._class_samples[k]:
                for a in incidence.row(sid):
                    members.setdefault((k, a), []).append(sid)
        self._members = {ka: frozenset(v) for ka, v in members.items()}

    def class_samples(self, k: int) -> tuple[str, ...]:
        return self._class_samples[k]

    def members(self, k: int, a: int) -> frozenset[str]:
        return self._members.get((k, a), frozenset())

    def complement(self, k: int, a: int) -> frozenset[str]:
        return frozenset(self._class_samples[k]) - self.members(k, a)

    def realizable_attributes(self, k: int) -> list[int]:
        """Attributes with a nonempty member set for class k."""
        return [a for a in range(self.n_attributes) if self.members(k, a)]


@dataclass(frozen=True)
class PredictionRecord:
    """sample id -> (predicted class, true class)."""

    predictions: dict[str, tuple[int, int]]

    def covers(self, ids) -> bool:
        return all(sid in self.predictions for sid in ids)


def group_accuracy(group, predictions: PredictionRecord) -> float:
    if not group:
        raise GroupError("group_accuracy on an empty group")
    correct = 0
    for sid in group:
        try:
            pred, true = predictions.predictions[sid]
        except KeyError:
            raise GroupError(f"no prediction for sample {sid!r}") from None
        correct += int(pred == true)
    return correct / len(group)


def _floored(p: float, size: int) -> float:
    # log/ratio guard: a zero accuracy is replaced by half a count
    return max(p, 1.0 / (2 * size))


def spuriousness_score(k: int, a: int, index: GroupIndex,
                       predictions: PredictionRecord, metric: str) -> float:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    member = index.members(k, a)
    complement = index.complement(k, a)
    if not member or not complement:
        return ALPHA
    if metric == "constant":
        return 1.0
    p = group_accuracy(member, predictions)
    q = group_accuracy(complement, predictions)
    if metric in RATIO_METRICS:
        p = _floored(p, len(member))
        q = _floored(q, len(complement))
        logr = math.log(p / q)
        return math.tanh(abs(logr)) if metric == "tanh-abs-log-ratio" else math.tanh(logr)
    if metric == "abs-delta":
        return abs(p - q)
    return p - q  # delta


@dataclass(frozen=True)
class SpuriousnessTable:
    scores: np.ndarray  # (n_classes, n_attributes)
    classes: tuple[int, ...]
    metric_kind: str
    epoch_tag: int = 0

    def row(self, k: int) -> np.ndarray:
        return self.scores[self.classes.index(k)]


def build_spuriousness_table(index: GroupIndex, predictions: PredictionRecord,
                             metric: str, epoch_tag: int = 0) -> SpuriousnessTable:
    scores = np.empty((len(index.classes), index.n_attributes))
    for i, k in enumerate(index.classes):
        for a in range(index.n_attributes):
            scores[i, a] = spuriousness_score(k, a, index, predictions, metric)
    return SpuriousnessTable(scores=scores, classes=index.classes,
                             metric_kind=metric, epoch_tag=epoch_tag)


def sampling_distribution(table: SpuriousnessTable, k: int,
                          index: GroupIndex) -> np.ndarray:
    """Per-class attribute probabilities proportional to max(score, 0).

    Falls back to uniform over realizable attributes when every score is
    non-positive (e.g. at epoch 0 with a uniformly accurate classifier).
    """
    weights = np.maximum(table.row(k), 0.0)
    total = weights.sum()
    if total > 0:
        return weights / total
    realizable = index.realizable_attributes(k)
    if not realizable:
        raise GroupError(f"class {k} has no attribute with a nonempty member set")
    dist = np.zeros(table.scores.shape[1])
    dist[realizable] = 1.0 / len(realizable)
    return dist


def write_spuriousness_csv(path, table: SpuriousnessTable, index: GroupIndex,
                           attribute_names=None, sort_by_score: bool = False):
    """Audit artifact: one row per (class, attribute) with group sizes."""
    rows = []
    for i, k in enumerate(table.classes):
        for a in range(index.n_attributes):
            name = attribute_names[a] if attribute_names is not None else str(a)
            rows.append((k, name, table.scores[i, a],
                         len(index.members(k, a)), len(index.complement(k, a))))
    if sort_by_score:
        rows.sort(key=lambda r: -r[2])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "attribute", "score", "member_size", "complement_size"])
        for k, name, score, m, c in rows:
            writer.writerow([k, name, repr(float(score)), m, c])


def read_spuriousness_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["class"]), r["attribute"], float(r["score"]),
                 int(r["member_size"]), int(r["complement_size"])) for r in reader]
