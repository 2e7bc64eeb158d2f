"""String similarity measures used to soft-label syntactic variant pairs.

All functions work on Unicode code points (Python ``str``), are symmetric,
and return values in ``[0, 1]`` with 1 for identical inputs.
"""
from __future__ import annotations

from typing import Callable, Dict, FrozenSet

JW_PREFIX_WEIGHT = 0.1
JW_MAX_PREFIX = 4


def levenshtein_distance(a: str, b: str) -> int:
    """Minimum number of single-character insertions, deletions and substitutions."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        current = [i]
        for j, cb in enumerate(b, start=1):
            current.append(min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (ca != cb),
            ))
        previous = current
    return previous[-1]


def levenshtein_sim(a: str, b: str) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein_distance(a, b) / longest


def jaro_sim(a: str, b: str) -> float:
    if a == b:
        return 1.0
    if not a or not b:
        return 0.0
    # greedy matching depends on argument order
    if a > b:
        a, b = b, a
    window = max(max(len(a), len(b)) // 2 - 1, 0)
    a_flags = [False] * len(a)
    b_flags = [False] * len(b)
    matches = 0
    for i, ca in enumerate(a):
        lo = max(0, i - window)
        hi = min(len(b), i + window + 1)
        for j in range(lo, hi):
            if not b_flags[j] and b[j] == ca:
                a_flags[i] = b_flags[j] = True
                matches += 1
                break
    if matches == 0:
        return 0.0
    a_matched = [c for c, f in zip(a, a_flags) if f]
    b_matched = [c for c, f in zip(b, b_flags) if f]
    transpositions = sum(x != y for x, y in zip(a_matched, b_matched)) // 2
    m = float(matches)
    return (m / len(a) + m / len(b) + (m - transpositions) / m) / 3.0


def jaro_winkler_sim(a: str, b: str) -> float:
    """Jaro similarity with the Winkler common-prefix boost (p=0.1, prefix <= 4)."""
    jaro = jaro_sim(a, b)
    prefix = 0
    for ca, cb in zip(a[:JW_MAX_PREFIX], b[:JW_MAX_PREFIX]):
        if ca != cb:
            break
        prefix += 1
    return min(1.0, jaro + prefix * JW_PREFIX_WEIGHT * (1.0 - jaro))


def trigrams(s: str) -> FrozenSet[str]:
    # strings shorter than a gram are their own single gram
    if len(s) < 3:
        return frozenset([s])
    return frozenset(s[i:i + 3] for i in range(len(s) - 2))


def trigram_jaccard_sim(a: str, b: str) -> float:
    ta, tb = trigrams(a), trigrams(b)
    union = ta | tb
    return len(ta & tb) / len(union)


MEASURES: Dict[str, Callable[[str, str], float]] = {
    "trigram_jaccard": trigram_jaccard_sim,
    "levenshtein": levenshtein_sim,
    "jaro_winkler": jaro_winkler_sim,
}
