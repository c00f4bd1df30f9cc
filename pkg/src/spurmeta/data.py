"""Feature-vector datasets and their on-disk CSV format.

File layout: a header line ``dim=<d> classes=<K>`` followed by CSV rows
``id,class,group,feat_0,...,feat_{d-1}``.  The group column holds the
ground-truth spurious-attribute id, or -1 when unknown.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DataError(Exception):
    pass


@dataclass
class FeatureStore:
    ids: list[str]
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int
    groups: np.ndarray | None = None  # (n,) int spurious-attribute ids
    n_classes: int = 0

    def __post_init__(self):
        if len(self.ids) != self.features.shape[0] or len(self.ids) != len(self.labels):
            raise DataError("ids/features/labels length mismatch")
        if self.n_classes == 0:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        self._index = {sid: i for i, sid in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise DataError("duplicate sample ids in feature store")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def index_of(self, sample_id: str) -> int:
        return self._index[sample_id]

    def matrix_for(self, sample_ids) -> np.ndarray:
        rows = [self._index[sid] for sid in sample_ids]
        return self.features[rows]

    def label_of(self, sample_id: str) -> int:
        return int(self.labels[self._index[sample_id]])

    def label_map(self) -> dict[str, int]:
        return {sid: int(y) for sid, y in zip(self.ids, self.labels)}

    def class_ids(self, k: int) -> list[str]:
        return [sid for sid, y in zip(self.ids, self.labels) if y == k]


def write_dataset(path, store: FeatureStore):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim={store.dim} classes={store.n_classes}\n")
        groups = store.groups if store.groups is not None else [-1] * len(store)
        for i, sid in enumerate(store.ids):
            feats = ",".join(repr(float(v)) for v in store.features[i])
            fh.write(f"{sid},{int(store.labels[i])},{int(groups[i])},{feats}\n")


def read_dataset(path) -> FeatureStore:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        fields = dict(part.split("=", 1) for part in header.split())
        try:
            dim = int(fields["dim"])
            n_classes = int(fields["classes"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}: bad header {header!r}") from exc
        ids, labels, groups, feats = [], [], [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 + dim:
                raise DataError(f"{path}:{lineno}: expected {3 + dim} fields, got {len(parts)}")
            ids.append(parts[0])
            labels.append(int(parts[1]))
            groups.append(int(parts[2]))
            feats.append([float(v) for v in parts[3:]])
    features = np.array(feats, dtype=float).reshape(len(ids), dim)
    garr = np.array(groups, dtype=int)
    return FeatureStore(ids=ids, features=features,
                        labels=np.array(labels, dtype=int),
                        groups=None if (garr == -1).all() else garr,
                        n_classes=n_classes)
