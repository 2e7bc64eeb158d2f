"""Seeded synthetic dictionaries and noisy query sets for benchmarking."""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Tuple

import numpy as np

from .refset import QueryRecord, ReferenceSet

_ONSETS = ["b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cr", "st", "tr", "ph"]
_VOWELS = ["a", "e", "i", "o", "u", "ay", "ei", "ou"]
_CODAS = ["", "", "n", "r", "s", "l", "x", "th"]
_KINDS = ["kinase", "receptor", "protein", "factor", "channel", "ligase", "transporter", "synthase", "binding protein"]
_WHITESPACE = re.compile(r"\s+")
_ALPHABET = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"


@dataclass
class SyntheticCorpus:
    reference: ReferenceSet
    queries: List[QueryRecord]
    families: Dict[str, FrozenSet[str]]


def _word(rng: np.random.Generator, syllables: int) -> str:
    return "".join(
        _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] + _CODAS[rng.integers(len(_CODAS))]
        for _ in range(syllables)
    )


def _entity_names(rng: np.random.Generator, n_names: int) -> List[str]:
    stem = _word(rng, int(rng.integers(2, 4)))
    prefix = stem[:int(rng.integers(3, 5))].upper()
    num = str(int(rng.integers(1, 20)))
    symbol = prefix + num
    kind = _KINDS[rng.integers(len(_KINDS))]
    pool = [
        symbol,
        f"{stem} {kind} {num}",
        f"{stem.capitalize()}-{num}",
        f"{prefix}-{num}",
        f"{_word(rng, 2)} {stem} {kind}",
        f"{stem}{num} ({symbol})",
        f"{_word(rng, 3)} {num}",
        f"{kind} {symbol}",
    ]
    out: List[str] = []
    for name in pool:
        if name not in out:
            out.append(name)
    return out[:n_names]


def _edit(rng: np.random.Generator, s: str) -> str:
    op = int(rng.integers(3)) if len(s) > 1 else 1
    pos = int(rng.integers(len(s) + (op == 1)))
    ch = _ALPHABET[rng.integers(len(_ALPHABET))]
    if op == 0:  # substitute
        if s[pos] == ch:
            ch = "x" if ch != "x" else "y"
        return s[:pos] + ch + s[pos + 1:]
    if op == 1:  # insert
        return s[:pos] + ch + s[pos:]
    return s[:pos] + s[pos + 1:]  # delete


def _case_change(rng: np.random.Generator, name: str) -> str:
    options = [v for v in (name.upper(), name.lower()) if v != name]
    return options[rng.integers(len(options))] if options else name


TRANSFORMS = (
    lambda rng, s: _WHITESPACE.sub("", s),
    lambda rng, s: "".join(ch for ch in s if ch.isalnum()),
    _case_change,
)


def noisy_mention(rng: np.random.Generator, name: str) -> str:
    """A randomly chosen transform that changes ``name`` (space removal,
    punctuation removal, or case change), then one random character edit."""
    variants = []
    for transform in TRANSFORMS:
        v = transform(rng, name)
        if v and v != name:
            variants.append(v)
    base = variants[rng.integers(len(variants))] if variants else name
    return _edit(rng, base)


def make_corpus(n_entities: int = 200, min_names: int = 3, max_names: int = 6, queries_per_entity: int = 1,
                family_size: int = 0, seed: int = 0) -> SyntheticCorpus:
    """Random dictionary plus held-out noisy mentions.

    Mentions never coincide with a reference name.  With ``family_size``
    > 1, consecutive entities are grouped into families of that size.
    """
    if not 1 <= min_names <= max_names:
        raise ValueError("need 1 <= min_names <= max_names")
    rng = np.random.default_rng(seed)
    pairs: List[Tuple[str, str]] = []
    taken = set()
    ids = []
    while len(ids) < n_entities:
        eid = f"E{len(ids):05d}"
        names = [n for n in _entity_names(rng, int(rng.integers(min_names, max_names + 1))) if n not in taken]
        if len(names) < min_names:
            continue
        taken.update(names)
        ids.append(eid)
        pairs.extend((eid, n) for n in names)
    reference = ReferenceSet.from_pairs(pairs)
    queries = []
    for entity in reference:
        made = 0
        while made < queries_per_entity:
            mention = noisy_mention(rng, entity.names[rng.integers(len(entity.names))])
            if mention.strip() and mention not in taken and mention == mention.strip():
                queries.append(QueryRecord(mention, entity.id))
                made += 1
    families: Dict[str, FrozenSet[str]] = {}
    if family_size > 1:
        for i in range(0, len(ids), family_size):
            group = ids[i:i + family_size]
            if len(group) > 1:
                families[f"F{i // family_size:04d}"] = frozenset(group)
    return SyntheticCorpus(reference, queries, families)


def serialize_families(families: Dict[str, FrozenSet[str]]) -> str:
    return "".join(f"{fam}\t{eid}\n" for fam in sorted(families) for eid in sorted(families[fam]))
