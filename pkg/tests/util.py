"""Shared builders for the test suite."""

import numpy as np

from spurmeta.corpus import AttributeIncidence
from spurmeta.data import FeatureStore
from spurmeta.groups import GroupIndex, PredictionRecord


def make_group_index(row_map, labels, n_attributes, classes=None):
    incidence = AttributeIncidence(
        rows={sid: frozenset(v) for sid, v in row_map.items()},
        n_attributes=n_attributes)
    if classes is None:
        classes = sorted(set(labels.values()))
    return GroupIndex(labels=labels, incidence=incidence, classes=classes)


def two_group_index(n_member=50, n_complement=50):
    """One class split into an attribute-0 member set and its complement."""
    rows, labels = {}, {}
    for i in range(n_member):
        rows[f"m{i:03d}"] = {0}
        labels[f"m{i:03d}"] = 0
    for i in range(n_complement):
        rows[f"c{i:03d}"] = {1}
        labels[f"c{i:03d}"] = 0
    return make_group_index(rows, labels, n_attributes=2, classes=[0])


def record_with_accuracy(index, k, a, p, q):
    """Predictions hitting accuracy p on members(k, a) and q on the rest.

    p and q must be multiples of 1/|group| for the accuracies to be exact.
    """
    preds = {}
    for group, acc in ((sorted(index.members(k, a)), p),
                      (sorted(index.complement(k, a)), q)):
        n_right = round(acc * len(group))
        for j, sid in enumerate(group):
            preds[sid] = (k if j < n_right else k + 1, k)
    return PredictionRecord(preds)


def single_attribute_index(n_classes=2, n_attributes=4, per_group=30):
    """Every sample carries exactly one attribute; all groups equal-sized."""
    rows, labels = {}, {}
    for k in range(n_classes):
        for a in range(n_attributes):
            for i in range(per_group):
                sid = f"k{k}a{a}i{i:03d}"
                rows[sid] = {a}
                labels[sid] = k
    return make_group_index(rows, labels, n_attributes)


def random_store(ids, dim, rng, labels=None, n_classes=2):
    if labels is None:
        labels = np.array([i % n_classes for i in range(len(ids))])
    return FeatureStore(ids=list(ids),
                       features=rng.normal(size=(len(ids), dim)),
                       labels=np.asarray(labels), n_classes=n_classes)
