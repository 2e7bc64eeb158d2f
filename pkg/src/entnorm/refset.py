"""Reference sets and gold-labeled query sets.

Both are read from tab-separated text: ``id<TAB>name`` for references and
``mention<TAB>gold_id`` for queries.  Lines starting with ``#`` and blank
lines are skipped.
"""
from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, List, Mapping, Tuple, Union

TextSource = Union[str, Path, Iterable[str]]


class ParseError(ValueError):
    """Raised for malformed TSV input; carries the 1-based line number."""

    def __init__(self, message: str, line_number: int | None = None) -> None:
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


_FORBIDDEN = ("\t", "\n", "\r")


def _check_text(value: str, what: str) -> None:
    if any(ch in value for ch in _FORBIDDEN):
        raise ValueError(f"{what} {value!r} contains a tab or line break")


def _check_id(value: str) -> str:
    # a leading '#' would read back as a comment line
    if not value or value != value.strip() or value.startswith("#"):
        raise ValueError(f"invalid entity id {value!r}")
    _check_text(value, "entity id")
    return value


@dataclass(frozen=True)
class Entity:
    id: str
    names: Tuple[str, ...]

    def __post_init__(self) -> None:
        _check_id(self.id)
        if not self.names:
            raise ValueError(f"entity {self.id} has no names")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"entity {self.id} has duplicate names")
        for name in self.names:
            if not name.strip():
                raise ValueError(f"entity {self.id} has a blank name")
            _check_text(name, "name")


@dataclass(frozen=True)
class QueryRecord:
    mention: str
    gold_id: str

    def __post_init__(self) -> None:
        if not self.mention.strip():
            raise ValueError("empty mention")
        if self.mention.startswith("#"):
            raise ValueError("mention may not start with '#'")
        _check_text(self.mention, "mention")
        _check_id(self.gold_id)


@dataclass(frozen=True)
class ReferenceStats:
    entities: int
    pairs: int
    histogram: Mapping[int, int]


class ReferenceSet:
    """Canonical entities with a name -> entity-id multimap.

    Entity order is first-appearance order in the source, and names keep
    their first-appearance order within an entity.  The same name string
    may belong to several entities.
    """

    def __init__(self, entities: Iterable[Entity]) -> None:
        self._entities: Tuple[Entity, ...] = tuple(entities)
        self._by_id: Dict[str, Entity] = {}
        lookup: Dict[str, set] = {}
        for entity in self._entities:
            if entity.id in self._by_id:
                raise ValueError(f"duplicate entity id {entity.id}")
            self._by_id[entity.id] = entity
            for name in entity.names:
                lookup.setdefault(name, set()).add(entity.id)
        self._lookup: Dict[str, FrozenSet[str]] = {k: frozenset(v) for k, v in lookup.items()}

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[str, str]]) -> "ReferenceSet":
        grouped: Dict[str, List[str]] = {}
        for entity_id, name in pairs:
            names = grouped.setdefault(entity_id, [])
            if name not in names:
                names.append(name)
        return cls(Entity(eid, tuple(names)) for eid, names in grouped.items())

    @property
    def entities(self) -> Tuple[Entity, ...]:
        return self._entities

    @property
    def name_lookup(self) -> Mapping[str, FrozenSet[str]]:
        return self._lookup

    def __len__(self) -> int:
        return len(self._entities)

    def __contains__(self, entity_id: object) -> bool:
        return entity_id in self._by_id

    def __getitem__(self, entity_id: str) -> Entity:
        return self._by_id[entity_id]

    def __iter__(self) -> Iterator[Entity]:
        return iter(self._entities)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ReferenceSet):
            return NotImplemented
        return self._entities == other._entities

    def __repr__(self) -> str:
        return f"ReferenceSet({len(self._entities)} entities, {self.pair_count()} names)"

    def name_pairs(self) -> Iterator[Tuple[str, str]]:
        """Yield every ``(entity_id, name)`` pair in storage order."""
        for entity in self._entities:
            for name in entity.names:
                yield entity.id, name

    def pair_count(self) -> int:
        return sum(len(e.names) for e in self._entities)

    def entity_of(self, name: str) -> FrozenSet[str]:
        return self._lookup.get(name, frozenset())


def _iter_lines(source: TextSource) -> Iterator[str]:
    if isinstance(source, Path):
        with open(source, encoding="utf-8", newline="\n") as fh:
            yield from fh
    elif isinstance(source, str):
        yield from io.StringIO(source, newline="\n")
    else:
        yield from source


def _records(source: TextSource) -> Iterator[Tuple[int, List[str]]]:
    for number, raw in enumerate(_iter_lines(source), start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.startswith("#"):
            continue
        yield number, line.split("\t")


def parse_reference_set(source: TextSource) -> ReferenceSet:
    """Parse ``id<TAB>name`` lines into a :class:`ReferenceSet`.

    ``source`` may be a :class:`~pathlib.Path`, the text itself as a
    ``str``, or any iterable of lines (an open file works).
    Duplicate ``(id, name)`` lines collapse into one.
    """
    pairs = []
    for number, fields in _records(source):
        if len(fields) != 2:
            raise ParseError(f"expected 2 tab-separated fields, got {len(fields)}", number)
        entity_id, name = fields
        try:
            _check_id(entity_id)
        except ValueError as exc:
            raise ParseError(str(exc), number) from None
        if not name.strip():
            raise ParseError("empty name", number)
        pairs.append((entity_id, name))
    if not pairs:
        raise ParseError("reference set is empty")
    return ReferenceSet.from_pairs(pairs)


def parse_query_set(source: TextSource) -> List[QueryRecord]:
    """Parse ``mention<TAB>gold_id`` lines, keeping order and duplicates."""
    records = []
    for number, fields in _records(source):
        if len(fields) != 2:
            raise ParseError(f"expected 2 tab-separated fields, got {len(fields)}", number)
        try:
            records.append(QueryRecord(fields[0], fields[1]))
        except ValueError as exc:
            raise ParseError(str(exc), number) from None
    return records


def serialize_reference_set(refset: ReferenceSet) -> str:
    return "".join(f"{eid}\t{name}\n" for eid, name in refset.name_pairs())


def serialize_query_set(queries: Iterable[QueryRecord]) -> str:
    return "".join(f"{q.mention}\t{q.gold_id}\n" for q in queries)


def reference_stats(refset: ReferenceSet) -> ReferenceStats:
    histogram = Counter(len(e.names) for e in refset.entities)
    return ReferenceStats(
        entities=len(refset),
        pairs=refset.pair_count(),
        histogram=dict(sorted(histogram.items())),
    )
