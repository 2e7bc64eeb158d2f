"""Embedding a reference set, answering mentions, and scoring Hits@k."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import BinaryIO, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .ann_index import ForestConfig, RpForest, VectorStore, build_index, index_from_bytes, index_to_bytes, query
from .encoder import EncoderModel, model_fingerprint
from .refset import QueryRecord, ReferenceSet

log = logging.getLogger(__name__)

DEFAULT_OVERFETCH = 5


class FingerprintMismatch(ValueError):
    """An index was built with a different model than the one supplied."""


@dataclass
class EmbeddedReference:
    fingerprint: str
    store: VectorStore
    forest: RpForest

    def check_model(self, model: EncoderModel, fingerprint: Optional[str] = None) -> None:
        actual = fingerprint or model_fingerprint(model)
        if actual != self.fingerprint:
            raise FingerprintMismatch(
                f"index was built with model {self.fingerprint[:12]}, got {actual[:12]}"
            )

    def to_bytes(self) -> bytes:
        return index_to_bytes(self.forest, self.store, self.fingerprint)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddedReference":
        forest, store, fingerprint = index_from_bytes(data)
        return cls(fingerprint, store, forest)

    def save(self, stream: BinaryIO) -> None:
        stream.write(self.to_bytes())

    @classmethod
    def load(cls, stream: BinaryIO) -> "EmbeddedReference":
        return cls.from_bytes(stream.read())


@dataclass(frozen=True)
class Candidate:
    entity_id: str
    name: str
    distance: float


@dataclass(frozen=True)
class RetrievalResult:
    mention: str
    candidates: Tuple[Candidate, ...]

    @property
    def ids(self) -> List[str]:
        return [c.entity_id for c in self.candidates]


def embed_reference(model: EncoderModel, refset: ReferenceSet, index_config: ForestConfig = ForestConfig(),
                    fingerprint: Optional[str] = None) -> EmbeddedReference:
    """Embed every (entity, name) row of ``refset`` and index the vectors."""
    if len(refset) == 0:
        raise ValueError("reference set is empty")
    rows = list(refset.name_pairs())
    entity_ids = [eid for eid, _ in rows]
    names = [name for _, name in rows]
    vectors = model.embed(names)
    store = VectorStore(entity_ids, names, vectors)
    forest = build_index(store, index_config.n_trees, index_config.max_leaf_size, index_config.seed,
                         split=index_config.split)
    return EmbeddedReference(fingerprint or model_fingerprint(model), store, forest)


def _collapse(neighbors, k: int) -> Tuple[Candidate, ...]:
    best: Dict[str, Candidate] = {}
    for nb in neighbors:
        if nb.entity_id not in best:
            best[nb.entity_id] = Candidate(nb.entity_id, nb.name, nb.distance)
    return tuple(best.values())[:k]


def retrieve(embedded: EmbeddedReference, model: EncoderModel, mention: str, k: int = 1,
             overfetch: int = DEFAULT_OVERFETCH, search_budget: Optional[int] = None) -> RetrievalResult:
    """Top-``k`` distinct entities for ``mention``, nearest first.

    ``overfetch * k`` raw neighbors are fetched before collapsing names to
    their entity (each entity keeps its closest name).
    """
    if not mention:
        raise ValueError("empty mention")
    return _retrieve_vector(embedded, mention, model.embed_one(mention), k, overfetch, search_budget)


def _retrieve_vector(embedded: EmbeddedReference, mention: str, vector: np.ndarray, k: int, overfetch: int,
                     search_budget: Optional[int]) -> RetrievalResult:
    if k < 1:
        raise ValueError("k must be positive")
    raw_k = min(overfetch * k, len(embedded.store))
    budget = search_budget if search_budget is not None else 50 * raw_k
    neighbors = query(embedded.forest, embedded.store, vector, raw_k, budget)
    return RetrievalResult(mention, _collapse(neighbors, k))


@dataclass
class QueryOutcome:
    record: QueryRecord
    rank: int  # 1-based rank of the gold entity, -1 when absent
    top: Optional[Candidate]
    gold_known: bool


@dataclass
class HitsReport:
    ks: Tuple[int, ...]
    hits: Dict[int, float]
    outcomes: List[QueryOutcome] = field(default_factory=list)

    @property
    def unknown_gold(self) -> int:
        return sum(not o.gold_known for o in self.outcomes)

    def metrics_tsv(self) -> str:
        """One ``k<TAB>hits`` row per k, no header."""
        return "".join(f"{k}\t{self.hits[k]!r}\n" for k in self.ks)

    def detail_tsv(self) -> str:
        """``mention, gold, rank or -1, top1 id, top1 distance`` per query, no header."""
        lines = []
        for o in self.outcomes:
            top_id = o.top.entity_id if o.top else ""
            top_d = repr(o.top.distance) if o.top else ""
            lines.append(f"{o.record.mention}\t{o.record.gold_id}\t{o.rank}\t{top_id}\t{top_d}\n")
        return "".join(lines)


def evaluate_hits_at_k(embedded: EmbeddedReference, model: EncoderModel, queries: Sequence[QueryRecord],
                       ks: Sequence[int] = (1, 3, 5, 10), refset: Optional[ReferenceSet] = None,
                       overfetch: int = DEFAULT_OVERFETCH, search_budget: Optional[int] = None) -> HitsReport:
    """Fraction of queries whose gold entity is among the top ``k`` for each ``k``.

    Gold ids missing from the index count as misses and are flagged.
    """
    if not queries:
        raise ValueError("no queries to evaluate")
    ks = tuple(sorted(set(int(k) for k in ks)))
    if ks[0] < 1:
        raise ValueError("k values must be positive")
    known = set(embedded.store.entity_ids) if refset is None else {e.id for e in refset}
    kmax = ks[-1]
    outcomes = []
    counts = dict.fromkeys(ks, 0)
    vectors = model.embed([q.mention for q in queries])
    for record, vector in zip(queries, vectors):
        result = _retrieve_vector(embedded, record.mention, vector, kmax, overfetch, search_budget)
        ids = result.ids
        rank = ids.index(record.gold_id) + 1 if record.gold_id in ids else -1
        for k in ks:
            if 0 < rank <= k:
                counts[k] += 1
        gold_known = record.gold_id in known
        if not gold_known:
            log.warning("gold id %s for mention %r is not in the reference set", record.gold_id, record.mention)
        outcomes.append(QueryOutcome(record, rank, result.candidates[0] if result.candidates else None, gold_known))
    hits = {k: counts[k] / len(queries) for k in ks}
    return HitsReport(ks, hits, outcomes)


def dump_embeddings(embedded: EmbeddedReference, stream: TextIO) -> int:
    """Write ``entity_id<TAB>name<TAB>v0,v1,...`` rows at 17 significant digits."""
    store = embedded.store
    for eid, name, vec in zip(store.entity_ids, store.names, store.vectors):
        stream.write(f"{eid}\t{name}\t{','.join(format(float(x), '.17g') for x in vec)}\n")
    return len(store)
