"""Labeled name pairs for contrastive training.

Four generators feed the training set: positives from the cross product
of each entity's names, random cross-entity negatives, soft-labeled
syntactic variants (same-name transforms and same-family name pairs), and
hard negatives mined from the current embedding space.
"""
from __future__ import annotations

import itertools
import re
from collections import Counter
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Set, Tuple

import numpy as np

from .refset import ParseError, ReferenceSet, TextSource, _records
from .strsim import MEASURES

if TYPE_CHECKING:  # pragma: no cover
    from .encoder import EncoderModel
    from .retrieval import EmbeddedReference

SOURCES = ("positive", "random_negative", "same_name_variant", "family_variant", "hard_negative")
VARIANT_SOURCES = ("same_name_variant", "family_variant")
NEGATIVE_SOURCES = ("random_negative", "hard_negative")

_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class TrainingPair:
    name_a: str
    name_b: str
    y: float
    source: str

    def __post_init__(self) -> None:
        if self.source not in SOURCES:
            raise ValueError(f"unknown pair source {self.source!r}")
        if not 0.0 <= self.y <= 1.0:
            raise ValueError(f"label {self.y} outside [0, 1]")
        if self.source == "positive" and self.y != 1.0:
            raise ValueError("positive pairs must have y=1")
        if self.source in NEGATIVE_SOURCES and self.y != 0.0:
            raise ValueError(f"{self.source} pairs must have y=0")
        if self.name_a == self.name_b and self.y < 1.0:
            raise ValueError(f"identical names with y={self.y}")


class PairSet:
    """Insertion-ordered collection of distinct training pairs."""

    def __init__(self, pairs: Iterable[TrainingPair] = ()) -> None:
        self._pairs: List[TrainingPair] = []
        self._seen: Set[TrainingPair] = set()
        self.extend(pairs)

    def add(self, pair: TrainingPair) -> bool:
        if pair in self._seen:
            return False
        self._seen.add(pair)
        self._pairs.append(pair)
        return True

    def extend(self, pairs: Iterable[TrainingPair]) -> int:
        return sum(self.add(p) for p in pairs)

    def __len__(self) -> int:
        return len(self._pairs)

    def __iter__(self) -> Iterator[TrainingPair]:
        return iter(self._pairs)

    def __getitem__(self, i: int) -> TrainingPair:
        return self._pairs[i]

    def __contains__(self, pair: object) -> bool:
        return pair in self._seen

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PairSet):
            return NotImplemented
        return self._pairs == other._pairs

    def counts(self) -> Dict[str, int]:
        found = Counter(p.source for p in self._pairs)
        return {s: found.get(s, 0) for s in SOURCES}

    def union(self, *others: "PairSet") -> "PairSet":
        merged = PairSet(self)
        for other in others:
            merged.extend(other)
        return merged

    def arrays(self) -> Tuple[List[str], List[str], np.ndarray]:
        return (
            [p.name_a for p in self._pairs],
            [p.name_b for p in self._pairs],
            np.array([p.y for p in self._pairs], dtype=np.float64),
        )

    def to_tsv(self) -> str:
        return "".join(f"{p.name_a}\t{p.name_b}\t{p.y!r}\t{p.source}\n" for p in self._pairs)

    @classmethod
    def from_tsv(cls, source: TextSource) -> "PairSet":
        pairs = cls()
        for number, fields in _records(source):
            if len(fields) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", number)
            try:
                pairs.add(TrainingPair(fields[0], fields[1], float(fields[2]), fields[3]))
            except ValueError as exc:
                raise ParseError(str(exc), number) from None
        return pairs


FamilyMap = Mapping[str, FrozenSet[str]]


def parse_family_map(source: TextSource, refset: Optional[ReferenceSet] = None) -> Dict[str, FrozenSet[str]]:
    """Read ``family_id<TAB>entity_id`` lines.

    With ``refset`` given, every entity id must exist in it.
    """
    families: Dict[str, Set[str]] = {}
    for number, fields in _records(source):
        if len(fields) != 2:
            raise ParseError(f"expected 2 tab-separated fields, got {len(fields)}", number)
        family, entity_id = fields
        if refset is not None and entity_id not in refset:
            raise ParseError(f"unknown entity id {entity_id!r}", number)
        families.setdefault(family, set()).add(entity_id)
    return {k: frozenset(v) for k, v in families.items()}


def _share_entity(refset: ReferenceSet, a: str, b: str) -> bool:
    return bool(refset.entity_of(a) & refset.entity_of(b))


def generate_positive_pairs(refset: ReferenceSet, cap_per_entity: int = 100, seed: int = 0) -> PairSet:
    if len(refset) == 0:
        raise ValueError("reference set is empty")
    if cap_per_entity < 1:
        raise ValueError("cap_per_entity must be positive")
    rng = np.random.default_rng(seed)
    out = PairSet()
    for entity in refset:
        combos = list(itertools.combinations(entity.names, 2))
        if len(combos) > cap_per_entity:
            keep = np.sort(rng.choice(len(combos), size=cap_per_entity, replace=False))
            combos = [combos[i] for i in keep]
        out.extend(TrainingPair(a, b, 1.0, "positive") for a, b in combos)
    return out


def sample_negative_pairs(refset: ReferenceSet, count: int, seed: int = 0, max_attempts: Optional[int] = None) -> PairSet:
    """Draw ``count`` distinct cross-entity pairs labeled 0.

    Pairs are resampled when the two strings are equal or when they share
    an entity through an ambiguous name.
    """
    if len(refset) < 2:
        raise ValueError("need at least two entities to sample negatives")
    rng = np.random.default_rng(seed)
    entities = refset.entities
    out = PairSet()
    attempts = 0
    limit = max_attempts if max_attempts is not None else 100 * count + 1000
    while len(out) < count:
        attempts += 1
        if attempts > limit:
            raise ValueError(f"could only sample {len(out)} of {count} negative pairs")
        i, j = rng.choice(len(entities), size=2, replace=False)
        a = entities[i].names[rng.integers(len(entities[i].names))]
        b = entities[j].names[rng.integers(len(entities[j].names))]
        if a == b or _share_entity(refset, a, b):
            continue
        out.add(TrainingPair(a, b, 0.0, "random_negative"))
    return out


def generate_same_name_variants(name: str) -> List[str]:
    """Whitespace removal, non-alphanumeric removal, upper case, lower case.

    Results keep transform order, drop duplicates and empty strings, and
    never include ``name`` itself.
    """
    candidates = [
        _WHITESPACE.sub("", name),
        "".join(ch for ch in name if ch.isalnum()),
        name.upper(),
        name.lower(),
    ]
    out: List[str] = []
    for v in candidates:
        if v and v != name and v not in out:
            out.append(v)
    return out


def labeled_variant_pairs(a: str, b: str, source: str) -> List[TrainingPair]:
    """One pair per string measure, each labeled with that measure's score."""
    if a == b:
        return []
    return [TrainingPair(a, b, float(fn(a, b)), source) for fn in MEASURES.values()]


def generate_variation_pairs(refset: ReferenceSet, families: Optional[FamilyMap] = None, seed: int = 0,
                             family_pairs_per_family: int = 20) -> PairSet:
    """Soft-labeled syntactic pairs: name/variant and same-family cross-entity names."""
    out = PairSet()
    for _, name in refset.name_pairs():
        for variant in generate_same_name_variants(name):
            out.extend(labeled_variant_pairs(name, variant, "same_name_variant"))
    if not families:
        return out
    rng = np.random.default_rng(seed)
    for family in sorted(families):
        members = sorted(e for e in families[family] if e in refset)
        if len(members) < 2:
            continue
        cross = [
            (a, b)
            for i, j in itertools.combinations(range(len(members)), 2)
            for a in refset[members[i]].names
            for b in refset[members[j]].names
            if a != b
        ]
        if len(cross) > family_pairs_per_family:
            keep = np.sort(rng.choice(len(cross), size=family_pairs_per_family, replace=False))
            cross = [cross[k] for k in keep]
        for a, b in cross:
            out.extend(labeled_variant_pairs(a, b, "family_variant"))
    return out


def initial_pairs(refset: ReferenceSet, cap_per_entity: int = 100, negative_ratio: float = 1.0, seed: int = 0) -> PairSet:
    """Positives plus ``negative_ratio`` times as many random negatives."""
    positives = generate_positive_pairs(refset, cap_per_entity, seed)
    n_neg = max(1, int(round(negative_ratio * len(positives))))
    negatives = sample_negative_pairs(refset, n_neg, seed + 1)
    return positives.union(negatives)


def mine_hard_negatives(model: "EncoderModel", refset: ReferenceSet, index: "EmbeddedReference", k: int,
                        search_budget: Optional[int] = None) -> PairSet:
    """Close cross-entity neighbors of every reference name, labeled 0.

    Each indexed name is looked up among its ``k`` nearest other rows.
    Neighbors sharing an entity or the exact string are skipped, and
    pairs are deduplicated regardless of order.
    """
    from .ann_index import query

    if k < 1:
        raise ValueError("k must be positive")
    store = index.store
    if store.dim != model.config.output_dim:
        raise ValueError(f"index dimension {store.dim} != model output dimension {model.config.output_dim}")
    budget = search_budget if search_budget is not None else 50 * (k + 1)
    seen: Set[FrozenSet[str]] = set()
    out = PairSet()
    for row in range(len(store)):
        name = store.names[row]
        neighbors = query(index.forest, store, store.vectors[row], k + 1, budget)
        taken = 0
        for nb in neighbors:
            if nb.row_id == row:
                continue
            if taken == k:
                break
            taken += 1
            if nb.name == name or _share_entity(refset, name, nb.name):
                continue
            key = frozenset((name, nb.name))
            if key in seen:
                continue
            seen.add(key)
            out.add(TrainingPair(name, nb.name, 0.0, "hard_negative"))
    return out
