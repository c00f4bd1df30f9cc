"""Caption ingestion, attribute extraction, vocabulary and incidence building.

Attributes are single lowercase words pulled out of free-text captions.  A
part-of-speech lexicon decides which words count as attributes (nouns and
adjectives); everything else, including words the lexicon has never seen,
is dropped.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

VALID_TAGS = {"NOUN", "ADJ", "OTHER"}
ATTRIBUTE_TAGS = {"NOUN", "ADJ"}

_WORD_RE = re.compile(r"[a-z]+")


class CorpusError(Exception):
    """Malformed caption/lexicon input or inconsistent corpus state."""


@dataclass(frozen=True)
class CaptionRecord:
    sample_id: str
    caption: str | None = None
    attributes: tuple[str, ...] | None = None


@dataclass(frozen=True)
class CaptionSet:
    records: tuple[CaptionRecord, ...]
    pre_extracted: bool

    def __len__(self):
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.sample_id for r in self.records]


class PosLexicon:
    """word -> set of POS tags; unknown words map to the empty set."""

    def __init__(self, entries: dict[str, set[str]] | None = None):
        self._entries: dict[str, frozenset[str]] = {}
        for word, tags in (entries or {}).items():
            bad = set(tags) - VALID_TAGS
            if bad:
                raise CorpusError(f"invalid POS tags {sorted(bad)} for word {word!r}")
            self._entries[word.lower()] = frozenset(tags)

    def tags(self, word: str) -> frozenset[str]:
        return self._entries.get(word.lower(), frozenset())

    def __contains__(self, word: str) -> bool:
        return word.lower() in self._entries

    def __len__(self):
        return len(self._entries)

    def words(self) -> list[str]:
        return sorted(self._entries)


def load_lexicon(path) -> PosLexicon:
    """Parse a ``word<TAB>TAG[,TAG...]`` file into a lexicon."""
    entries: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CorpusError(f"{path}:{lineno}: expected 'word<TAB>TAGS', got {line!r}")
            word, tag_field = parts
            tags = {t.strip() for t in tag_field.split(",") if t.strip()}
            if not tags or tags - VALID_TAGS:
                raise CorpusError(f"{path}:{lineno}: invalid tag list {tag_field!r}")
            entries.setdefault(word.lower(), set()).update(tags)
    return PosLexicon(entries)


def load_captions(path, format: str = "caption-text") -> CaptionSet:
    """Load a JSON-lines caption file.

    ``caption-text`` lines look like ``{"id": ..., "caption": ...}``;
    ``pre-extracted`` lines carry ``{"id": ..., "attributes": [...]}`` and
    bypass lexicon tagging downstream.
    """
    if format not in ("caption-text", "pre-extracted"):
        raise CorpusError(f"unknown caption format {format!r}")
    pre = format == "pre-extracted"
    records: list[CaptionRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(obj, dict) or "id" not in obj:
                raise CorpusError(f"{path}:{lineno}: missing 'id' field")
            sid = obj["id"]
            if not isinstance(sid, str) or not sid:
                raise CorpusError(f"{path}:{lineno}: 'id' must be a nonempty string")
            if sid in seen:
                raise CorpusError(f"{path}:{lineno}: duplicate sample id {sid!r}")
            seen.add(sid)
            if pre:
                attrs = obj.get("attributes")
                if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
                    raise CorpusError(f"{path}:{lineno}: 'attributes' must be a list of strings")
                records.append(CaptionRecord(sid, attributes=tuple(a.lower() for a in attrs)))
            else:
                caption = obj.get("caption")
                if not isinstance(caption, str):
                    raise CorpusError(f"{path}:{lineno}: 'caption' must be a string")
                records.append(CaptionRecord(sid, caption=caption.lower()))
    return CaptionSet(records=tuple(records), pre_extracted=pre)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphabetic boundaries."""
    return _WORD_RE.findall(text.lower())


def extract_attributes(caption: str, lexicon: PosLexicon) -> set[str]:
    """Keep the tokens whose lexicon tags intersect {NOUN, ADJ}."""
    return {tok for tok in tokenize(caption) if lexicon.tags(tok) & ATTRIBUTE_TAGS}


def record_attributes(record: CaptionRecord, lexicon: PosLexicon) -> set[str]:
    if record.attributes is not None:
        return set(record.attributes)
    return extract_attributes(record.caption or "", lexicon)


@dataclass(frozen=True)
class AttributeVocabulary:
    attributes: tuple[str, ...]
    frequencies: dict[str, int] = field(compare=False)
    min_frequency: int = 1

    def __len__(self):
        return len(self.attributes)

    def index(self, attribute: str) -> int:
        try:
            return self.attributes.index(attribute)
        except ValueError:
            raise KeyError(attribute) from None

    def __contains__(self, attribute: str) -> bool:
        return attribute in self.frequencies


def build_vocabulary(captions: CaptionSet, lexicon: PosLexicon,
                     min_frequency: int = 1) -> AttributeVocabulary:
    """Count per-sample attribute occurrences and drop rare attributes.

    Frequency is the number of samples whose caption mentions the attribute
    at least once, not the number of token occurrences.
    """
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    counts: dict[str, int] = {}
    for rec in captions.records:
        for attr in record_attributes(rec, lexicon):
            counts[attr] = counts.get(attr, 0) + 1
    kept = sorted(a for a, c in counts.items() if c >= min_frequency)
    freqs = {a: counts[a] for a in kept}
    return AttributeVocabulary(attributes=tuple(kept), frequencies=freqs,
                               min_frequency=min_frequency)


@dataclass(frozen=True)
class AttributeIncidence:
    """Per sample id, the set of vocabulary attribute indices in its caption."""

    rows: dict[str, frozenset[int]]
    n_attributes: int

    def row(self, sample_id: str) -> frozenset[int]:
        return self.rows[sample_id]

    def __len__(self):
        return len(self.rows)


def build_incidence(captions: CaptionSet, vocab: AttributeVocabulary,
                    lexicon: PosLexicon,
                    expected_ids=None) -> AttributeIncidence:
    """Intersect each sample's extracted attributes with the vocabulary."""
    lookup = {a: i for i, a in enumerate(vocab.attributes)}
    rows: dict[str, frozenset[int]] = {}
    for rec in captions.records:
        attrs = record_attributes(rec, lexicon)
        rows[rec.sample_id] = frozenset(lookup[a] for a in attrs if a in lookup)
    if expected_ids is not None:
        missing = sorted(set(expected_ids) - set(rows))
        if missing:
            raise CorpusError(f"samples without captions: {missing}")
    return AttributeIncidence(rows=rows, n_attributes=len(vocab))
