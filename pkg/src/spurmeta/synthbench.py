"""Synthetic spurious-correlation benchmark with template captions.

Each sample has a gaussian core block (class signal) and a gaussian
spurious block (attribute signal).  A fraction rho of each training class
aligns with the class-correlated attribute, mirroring the skew of the
standard benchmarks; the test split is group-balanced.  Captions embed
the class noun and the latent attribute noun so the corpus pipeline can
recover the ground-truth groups from text alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import CaptionRecord, CaptionSet, PosLexicon
from .data import FeatureStore

DEFAULT_CLASS_WORDS = ("wren", "heron", "lynx", "otter", "finch", "viper",
                       "crane", "badger")
DEFAULT_ATTR_WORDS = ("forest", "lake", "desert", "tundra", "meadow", "swamp",
                      "cliff", "dune")
DEFAULT_DISTRACTORS = ("small", "bright", "quiet", "stone", "cloud", "branch",
                       "river", "old", "pale", "moss")
DEFAULT_TEMPLATES = ("a {cls} seen near the {attr}",
                     "the {cls} resting by a {attr}",
                     "one {cls} photographed at the {attr}")
_DISTRACTOR_TAGS = {"small": "ADJ", "bright": "ADJ", "quiet": "ADJ",
                    "stone": "NOUN", "cloud": "NOUN", "branch": "NOUN",
                    "river": "NOUN", "old": "ADJ", "pale": "ADJ", "moss": "NOUN"}
_FILLER_WORDS = ("a", "the", "one", "seen", "near", "resting", "by",
                 "photographed", "at", "with")


class BenchError(Exception):
    pass


@dataclass(frozen=True)
class BenchSpec:
    n_classes: int = 2
    n_attributes: int = 4  # spurious attributes; >= n_classes
    core_dim: int = 5
    spurious_dim: int = 5
    n_train_per_class: int = 1000
    n_val_per_class: int = 200
    n_test_per_group: int = 250
    majority_fraction: float = 0.95  # rho
    noise_std: float = 1.0
    core_scale: float = 2.9  # class means at core_scale * e_k
    spurious_scale: float = 6.0  # attribute means at spurious_scale * e_a
    max_distractors: int = 3
    caption_templates: tuple[str, ...] = DEFAULT_TEMPLATES
    class_words: tuple[str, ...] = DEFAULT_CLASS_WORDS
    attribute_words: tuple[str, ...] = DEFAULT_ATTR_WORDS
    distractor_words: tuple[str, ...] = DEFAULT_DISTRACTORS
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise BenchError("need at least two classes")
        if self.core_dim < 1 or self.spurious_dim < 1:
            raise BenchError("block dims must be >= 1")
        if not 0.5 <= self.majority_fraction < 1.0:
            raise BenchError("majority_fraction must lie in [0.5, 1)")
        if min(self.n_train_per_class, self.n_val_per_class,
               self.n_test_per_group) < 1:
            raise BenchError("all splits must be nonempty")
        if self.n_attributes < self.n_classes:
            raise BenchError("need at least one attribute per class")
        if self.n_classes > self.core_dim or self.n_attributes > self.spurious_dim:
            raise BenchError("need core_dim >= n_classes and "
                             "spurious_dim >= n_attributes for separable group means")
        if self.n_classes > len(self.class_words):
            raise BenchError("not enough class words for n_classes")
        if self.n_attributes > len(self.attribute_words):
            raise BenchError("not enough attribute words for n_attributes")
        if self.noise_std > 0 and self.core_scale * np.sqrt(2) < 4 * self.noise_std:
            raise BenchError("core means closer than 4 * noise_std")
        for tpl in self.caption_templates:
            if "{cls}" not in tpl or "{attr}" not in tpl:
                raise BenchError(f"template {tpl!r} missing a placeholder")

    @property
    def dim(self) -> int:
        return self.core_dim + self.spurious_dim


@dataclass
class SyntheticDataset:
    spec: BenchSpec
    train: FeatureStore
    val: FeatureStore
    test: FeatureStore

    def split(self, name: str) -> FeatureStore:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise BenchError(f"unknown split {name!r}") from None


def _sample_features(spec: BenchSpec, k: int, attr: int,
                     rng: np.random.Generator) -> np.ndarray:
    x = rng.normal(0.0, spec.noise_std, size=spec.dim)
    x[k] += spec.core_scale
    x[spec.core_dim + attr] += spec.spurious_scale
    return x


def _attribute_plan(spec: BenchSpec, k: int, per_class: int) -> list[int]:
    # class k aligns with attribute k for the majority; the minority cycles
    # evenly through the remaining attributes so no group rounds to zero
    n_major = round(spec.majority_fraction * per_class)
    if n_major == 0 or per_class - n_major < 0:
        raise BenchError("group sizes round to zero; enlarge the split")
    others = [a for a in range(spec.n_attributes) if a != k]
    plan = [k] * n_major
    plan += [others[i % len(others)] for i in range(per_class - n_major)]
    return plan


def _skewed_split(spec: BenchSpec, prefix: str, per_class: int,
                  rng: np.random.Generator) -> FeatureStore:
    ids, feats, labels, groups = [], [], [], []
    for k in range(spec.n_classes):
        for i, attr in enumerate(_attribute_plan(spec, k, per_class)):
            ids.append(f"{prefix}{k}_{i:05d}")
            feats.append(_sample_features(spec, k, attr, rng))
            labels.append(k)
            groups.append(attr)
    return FeatureStore(ids=ids, features=np.array(feats),
                        labels=np.array(labels), groups=np.array(groups),
                        n_classes=spec.n_classes)


def _balanced_split(spec: BenchSpec, prefix: str, per_group: int,
                    rng: np.random.Generator) -> FeatureStore:
    ids, feats, labels, groups = [], [], [], []
    for k in range(spec.n_classes):
        for attr in range(spec.n_attributes):
            for i in range(per_group):
                ids.append(f"{prefix}{k}_{attr}_{i:05d}")
                feats.append(_sample_features(spec, k, attr, rng))
                labels.append(k)
                groups.append(attr)
    return FeatureStore(ids=ids, features=np.array(feats),
                        labels=np.array(labels), groups=np.array(groups),
                        n_classes=spec.n_classes)


def generate_dataset(spec: BenchSpec,
                     rng: np.random.Generator | None = None) -> SyntheticDataset:
    """Skewed train/val splits plus a group-balanced test split."""
    root = np.random.SeedSequence(spec.seed) if rng is None else None
    if rng is None:
        tr_ss, va_ss, te_ss = root.spawn(3)
        rngs = [np.random.default_rng(s) for s in (tr_ss, va_ss, te_ss)]
    else:
        rngs = [rng, rng, rng]
    train = _skewed_split(spec, "tr_", spec.n_train_per_class, rngs[0])
    val = _skewed_split(spec, "va_", spec.n_val_per_class, rngs[1])
    test = _balanced_split(spec, "te_", spec.n_test_per_group, rngs[2])
    return SyntheticDataset(spec=spec, train=train, val=val, test=test)


def build_lexicon(spec: BenchSpec) -> PosLexicon:
    entries: dict[str, set[str]] = {}
    for w in spec.class_words[:spec.n_classes]:
        entries[w] = {"NOUN"}
    for w in spec.attribute_words[:spec.n_attributes]:
        entries[w] = {"NOUN"}
    for w in spec.distractor_words:
        entries[w] = {_DISTRACTOR_TAGS.get(w, "NOUN")}
    for w in _FILLER_WORDS:
        entries.setdefault(w, {"OTHER"})
    return PosLexicon(entries)


def synthesize_captions(store: FeatureStore, spec: BenchSpec,
                        rng: np.random.Generator) -> CaptionSet:
    """Template captions embedding the class noun, attribute noun and
    0..max_distractors random distractor words."""
    if store.groups is None:
        raise BenchError("store has no ground-truth attribute assignments")
    records = []
    for i, sid in enumerate(store.ids):
        tpl = spec.caption_templates[rng.integers(len(spec.caption_templates))]
        text = tpl.format(cls=spec.class_words[store.labels[i]],
                          attr=spec.attribute_words[store.groups[i]])
        n_extra = int(rng.integers(spec.max_distractors + 1))
        if n_extra:
            idx = rng.choice(len(spec.distractor_words), size=n_extra, replace=False)
            text += " with " + " ".join(spec.distractor_words[j] for j in sorted(idx))
        records.append(CaptionRecord(sample_id=sid, caption=text))
    return CaptionSet(records=tuple(records), pre_extracted=False)


def write_lexicon(path, lexicon: PosLexicon):
    with open(path, "w", encoding="utf-8") as fh:
        for w in lexicon.words():
            fh.write(f"{w}\t{','.join(sorted(lexicon.tags(w)))}\n")


def write_captions(path, captions: CaptionSet):
    import json
    with open(path, "w", encoding="utf-8") as fh:
        for rec in captions.records:
            fh.write(json.dumps({"id": rec.sample_id, "caption": rec.caption}) + "\n")


_SPEC_TYPES = {
    "n_classes": int, "n_attributes": int, "core_dim": int, "spurious_dim": int,
    "n_train_per_class": int, "n_val_per_class": int, "n_test_per_group": int,
    "majority_fraction": float, "noise_std": float, "core_scale": float,
    "spurious_scale": float, "max_distractors": int, "seed": int,
}


def load_bench_spec(path) -> BenchSpec:
    """Flat key=value benchmark spec file."""
    overrides = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BenchError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _SPEC_TYPES:
                raise BenchError(f"{path}:{lineno}: unknown spec key {key!r}")
            overrides[key] = _SPEC_TYPES[key](value)
    return BenchSpec(**overrides)
