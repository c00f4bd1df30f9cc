"""Meta-learning episode construction.

A spuriousness-aware episode picks, per class, a pair of attributes with
high spuriousness; support samples carry the first attribute and not the
second, query samples the reverse.  The random baseline draws support and
query uniformly from each class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .groups import GroupIndex, SpuriousnessTable, sampling_distribution


class EpisodeError(Exception):
    """Episode construction could not satisfy its size constraints."""


@dataclass(frozen=True)
class EpisodeConfig:
    n_support: int = 10
    n_classes_per_task: int | None = None  # None = all classes
    retry_budget: int = 20
    mode: str = "spuriousness-aware"  # or "random"

    def __post_init__(self):
        if self.n_support < 1:
            raise ValueError("n_support must be >= 1")
        if self.retry_budget < 1:
            raise ValueError("retry_budget must be >= 1")
        if self.mode not in ("spuriousness-aware", "random"):
            raise ValueError(f"unknown episode mode {self.mode!r}")


@dataclass(frozen=True)
class Episode:
    support: tuple[tuple[str, int], ...]  # (sample_id, class)
    query: tuple[tuple[str, int], ...]
    chosen_pairs: dict[int, tuple[int, int]] = field(default_factory=dict)

    def support_ids(self) -> list[str]:
        return [sid for sid, _ in self.support]

    def query_ids(self) -> list[str]:
        return [sid for sid, _ in self.query]

    def to_json(self, seed=None) -> str:
        payload = {
            "classes": sorted({y for _, y in self.support}),
            "pairs": {str(k): list(v) for k, v in sorted(self.chosen_pairs.items())},
            "support_ids": self.support_ids(),
            "query_ids": self.query_ids(),
            "seed": seed,
        }
        return json.dumps(payload)


def sample_attribute_pair(k: int, dist: np.ndarray, index: GroupIndex,
                          rng: np.random.Generator) -> tuple[int, int]:
    """Draw a_k from dist, then a_k' from the renormalized remainder.

    When removing a_k leaves no probability mass, the second draw falls
    back to a uniform choice over the remaining realizable attributes.
    """
    realizable = index.realizable_attributes(k)
    if len(realizable) < 2:
        raise EpisodeError(f"class {k} has fewer than two realizable attributes")
    a1 = int(rng.choice(len(dist), p=dist))
    rest = dist.copy()
    rest[a1] = 0.0
    total = rest.sum()
    if total > 0:
        a2 = int(rng.choice(len(rest), p=rest / total))
    else:
        pool = [a for a in realizable if a != a1]
        a2 = int(pool[rng.integers(len(pool))])
    return a1, a2


def _draw(pool: frozenset[str], n: int, rng: np.random.Generator) -> list[str]:
    ordered = sorted(pool)
    idx = rng.choice(len(ordered), size=n, replace=False)
    return [ordered[i] for i in idx]


def _select_classes(index: GroupIndex, cfg: EpisodeConfig,
                    rng: np.random.Generator) -> list[int]:
    classes = list(index.classes)
    kp = cfg.n_classes_per_task
    if kp is None or kp >= len(classes):
        return classes
    idx = rng.choice(len(classes), size=kp, replace=False)
    return sorted(classes[i] for i in idx)


def build_episode(index: GroupIndex, table: SpuriousnessTable,
                  cfg: EpisodeConfig, rng: np.random.Generator) -> Episode:
    """Construct one spuriousness-aware episode (support/query per class)."""
    support: list[tuple[str, int]] = []
    query: list[tuple[str, int]] = []
    pairs: dict[int, tuple[int, int]] = {}
    for k in _select_classes(index, cfg, rng):
        dist = sampling_distribution(table, k, index)
        pair = None
        for _ in range(cfg.retry_budget):
            a1, a2 = sample_attribute_pair(k, dist, index, rng)
            with_a1 = index.members(k, a1)
            with_a2 = index.members(k, a2)
            d_support = with_a1 - with_a2
            d_query = with_a2 - with_a1
            pair = (a1, a2)
            if len(d_support) >= cfg.n_support and len(d_query) >= cfg.n_support:
                break
        else:
            raise EpisodeError(
                f"retry budget ({cfg.retry_budget}) exhausted for class {k}; "
                f"last attempted attribute pair: {pair}")
        pairs[k] = pair
        support.extend((sid, k) for sid in _draw(d_support, cfg.n_support, rng))
        query.extend((sid, k) for sid in _draw(d_query, cfg.n_support, rng))
    return Episode(support=tuple(support), query=tuple(query), chosen_pairs=pairs)


def build_random_episode(index: GroupIndex, cfg: EpisodeConfig,
                         rng: np.random.Generator) -> Episode:
    """Baseline: uniform disjoint support/query draws per class."""
    support: list[tuple[str, int]] = []
    query: list[tuple[str, int]] = []
    for k in _select_classes(index, cfg, rng):
        samples = index.class_samples(k)
        need = 2 * cfg.n_support
        if len(samples) < need:
            raise EpisodeError(f"class {k} has {len(samples)} samples, needs {need}")
        picked = _draw(frozenset(samples), need, rng)
        support.extend((sid, k) for sid in picked[:cfg.n_support])
        query.extend((sid, k) for sid in picked[cfg.n_support:])
    return Episode(support=tuple(support), query=tuple(query), chosen_pairs={})
