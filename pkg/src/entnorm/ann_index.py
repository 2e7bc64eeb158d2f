"""Random-projection tree forest for cosine nearest-neighbor search.

Vectors are unit-normalized when stored.  Every tree splits a node with
the hyperplane halfway between two centers: two randomly chosen member
vectors, refined by a few two-means iterations unless the forest is built
with ``split="random_pair"``.  A query
walks all trees at once from a shared priority queue keyed on the smallest
margin seen along each path, gathers leaf rows until the search budget is
met, and re-ranks the candidates by exact cosine distance.
"""
from __future__ import annotations

import hashlib
import heapq
import io
import json
import struct
from dataclasses import dataclass
from typing import BinaryIO, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

INDEX_MAGIC = b"NSIX"
INDEX_VERSION = 1

_SPLIT_RETRIES = 3
_TWO_MEANS_ITERATIONS = 3
_TWO_MEANS_SAMPLE = 256
SPLIT_RULES = ("two_means", "random_pair")


class IndexFormatError(ValueError):
    """Index file is truncated, corrupt, or from another format version."""


class Neighbor(NamedTuple):
    row_id: int
    entity_id: str
    name: str
    distance: float


class VectorStore:
    """Rows of ``(entity_id, name, unit vector)``; row ids are positions."""

    def __init__(self, entity_ids: Sequence[str], names: Sequence[str], vectors: np.ndarray) -> None:
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D array")
        if not (len(entity_ids) == len(names) == vectors.shape[0]):
            raise ValueError("entity_ids, names and vectors differ in length")
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
            raise ValueError("vectors must be finite and nonzero")
        self.entity_ids: List[str] = list(entity_ids)
        self.names: List[str] = list(names)
        self.vectors = vectors / norms[:, None]

    @classmethod
    def from_unit_vectors(cls, entity_ids, names, vectors) -> "VectorStore":
        store = cls.__new__(cls)
        store.entity_ids = list(entity_ids)
        store.names = list(names)
        store.vectors = np.asarray(vectors, dtype=np.float64)
        return store

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VectorStore):
            return NotImplemented
        return (
            self.entity_ids == other.entity_ids
            and self.names == other.names
            and np.array_equal(self.vectors, other.vectors)
        )


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 50
    max_leaf_size: int = 16
    seed: int = 0
    split: str = "two_means"

    def __post_init__(self) -> None:
        if self.n_trees < 1 or self.max_leaf_size < 1:
            raise ValueError("n_trees and max_leaf_size must be positive")
        if self.split not in SPLIT_RULES:
            raise ValueError(f"split must be one of {SPLIT_RULES}")


class RpForest:
    """All trees flattened into shared node arrays.

    For node ``i``: ``left[i] < 0`` marks a leaf whose rows are
    ``leaf_rows[leaf_start[i]:leaf_start[i] + leaf_count[i]]``; otherwise the
    split is ``normals[split[i]] . x - offsets[i]``, positive going right.
    """

    def __init__(self, config: ForestConfig, dim: int, roots, left, right, split, offsets, normals,
                 leaf_start, leaf_count, leaf_rows) -> None:
        self.config = config
        self.dim = dim
        self.roots = np.asarray(roots, dtype=np.int64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.split = np.asarray(split, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.normals = np.asarray(normals, dtype=np.float64).reshape(-1, dim)
        self.leaf_start = np.asarray(leaf_start, dtype=np.int64)
        self.leaf_count = np.asarray(leaf_count, dtype=np.int64)
        self.leaf_rows = np.asarray(leaf_rows, dtype=np.int64)

    _ARRAYS = ("roots", "left", "right", "split", "offsets", "normals", "leaf_start", "leaf_count", "leaf_rows")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RpForest):
            return NotImplemented
        return self.config == other.config and self.dim == other.dim and all(
            np.array_equal(getattr(self, a), getattr(other, a)) for a in self._ARRAYS
        )

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    def tree_rows(self, tree: int) -> np.ndarray:
        """All rows reachable from one tree's root, in leaf order."""
        rows = []
        stack = [int(self.roots[tree])]
        while stack:
            node = stack.pop()
            if self.left[node] < 0:
                s = self.leaf_start[node]
                rows.append(self.leaf_rows[s:s + self.leaf_count[node]])
            else:
                stack.extend((int(self.right[node]), int(self.left[node])))
        return np.concatenate(rows)


class _Builder:
    def __init__(self, dim: int, refine: bool) -> None:
        self.dim = dim
        self.refine = refine
        self.left: List[int] = []
        self.right: List[int] = []
        self.split: List[int] = []
        self.offsets: List[float] = []
        self.normals: List[np.ndarray] = []
        self.leaf_start: List[int] = []
        self.leaf_count: List[int] = []
        self.leaf_rows: List[np.ndarray] = []
        self.n_leaf_rows = 0

    def _node(self) -> int:
        self.left.append(-1)
        self.right.append(-1)
        self.split.append(-1)
        self.offsets.append(0.0)
        self.leaf_start.append(0)
        self.leaf_count.append(0)
        return len(self.left) - 1

    def build_tree(self, X: np.ndarray, leaf_size: int, rng: np.random.Generator) -> int:
        root = self._node()
        stack = [(root, np.arange(X.shape[0]))]
        while stack:
            node, rows = stack.pop()
            if len(rows) <= leaf_size:
                self.leaf_start[node] = self.n_leaf_rows
                self.leaf_count[node] = len(rows)
                self.leaf_rows.append(rows)
                self.n_leaf_rows += len(rows)
                continue
            normal, offset, goes_right = self._choose_split(X, rows, rng)
            self.split[node] = len(self.normals)
            self.normals.append(normal)
            self.offsets[node] = offset
            lo, hi = self._node(), self._node()
            self.left[node], self.right[node] = lo, hi
            stack.append((hi, rows[goes_right]))
            stack.append((lo, rows[~goes_right]))
        return root

    def _centers(self, X, rows, rng):
        i, j = rng.choice(len(rows), size=2, replace=False)
        centers = np.stack([X[rows[i]], X[rows[j]]])
        if not self.refine:
            return centers
        sample = rows if len(rows) <= _TWO_MEANS_SAMPLE else rng.choice(rows, _TWO_MEANS_SAMPLE, replace=False)
        P = X[sample]
        for _ in range(_TWO_MEANS_ITERATIONS):
            sims = P @ centers.T
            first = sims[:, 0] >= sims[:, 1]
            if first.all() or not first.any():
                break
            centers = np.stack([P[first].mean(axis=0), P[~first].mean(axis=0)])
            norms = np.linalg.norm(centers, axis=1)
            if np.any(norms == 0.0):
                break
            centers /= norms[:, None]
        return centers

    def _choose_split(self, X, rows, rng):
        for _ in range(1 + _SPLIT_RETRIES):
            a, b = self._centers(X, rows, rng)
            diff = a - b
            norm = np.linalg.norm(diff)
            if norm == 0.0:
                continue
            normal = diff / norm
            offset = float(normal @ (a + b)) / 2.0
            goes_right = X[rows] @ normal - offset > 0.0
            n_right = int(goes_right.sum())
            if 0 < n_right < len(rows):
                return normal, offset, goes_right
        # duplicate-heavy node: zero normal, halves by row order
        goes_right = np.zeros(len(rows), dtype=bool)
        goes_right[len(rows) // 2:] = True
        return np.zeros(self.dim), 0.0, goes_right

    def finish(self, config: ForestConfig, roots: List[int]) -> RpForest:
        return RpForest(
            config, self.dim, roots, self.left, self.right, self.split, self.offsets,
            np.array(self.normals).reshape(-1, self.dim), self.leaf_start, self.leaf_count,
            np.concatenate(self.leaf_rows) if self.leaf_rows else np.zeros(0, dtype=np.int64),
        )


def build_index(store: VectorStore, n_trees: int = 50, max_leaf_size: int = 16, seed: int = 0,
                dim: Optional[int] = None, split: str = "two_means") -> RpForest:
    if len(store) == 0:
        raise ValueError("cannot index an empty store")
    if dim is not None and dim != store.dim:
        raise ValueError(f"dimension mismatch: store has {store.dim}, expected {dim}")
    config = ForestConfig(n_trees, max_leaf_size, seed, split)
    builder = _Builder(store.dim, refine=split == "two_means")
    roots = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        roots.append(builder.build_tree(store.vectors, max_leaf_size, rng))
    return builder.finish(config, roots)


def _unit_query(q: np.ndarray, dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (dim,):
        raise ValueError(f"query dimension {q.shape} does not match index dimension {dim}")
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("query vector must be finite and nonzero")
    return q / n


def _rank(store: VectorStore, rows: np.ndarray, q: np.ndarray, k: int) -> List[Neighbor]:
    dist = np.clip(1.0 - store.vectors[rows] @ q, 0.0, 2.0)
    order = np.lexsort((rows, dist))[:k]
    return [Neighbor(int(rows[i]), store.entity_ids[rows[i]], store.names[rows[i]], float(dist[i])) for i in order]


def brute_force_query(store: VectorStore, q: np.ndarray, k: int) -> List[Neighbor]:
    """Exact linear scan; ties go to the lower row id."""
    if k < 1:
        raise ValueError("k must be positive")
    q = _unit_query(q, store.dim)
    return _rank(store, np.arange(len(store)), q, k)


def candidate_rows(forest: RpForest, q: np.ndarray, search_budget: int) -> np.ndarray:
    """Rows gathered from leaves in best-first order, sorted ascending."""
    margins = forest.normals @ q
    split = forest.split
    left = forest.left
    right = forest.right
    offsets = forest.offsets
    heap = [(-np.inf, int(r)) for r in forest.roots]
    heapq.heapify(heap)
    found: set = set()
    chunks = []
    while heap and len(found) < search_budget:
        neg_priority, node = heapq.heappop(heap)
        if left[node] < 0:
            s = forest.leaf_start[node]
            rows = forest.leaf_rows[s:s + forest.leaf_count[node]]
            chunks.append(rows)
            found.update(rows.tolist())
            continue
        margin = margins[split[node]] - offsets[node]
        priority = -neg_priority
        heapq.heappush(heap, (-min(priority, margin), int(right[node])))
        heapq.heappush(heap, (-min(priority, -margin), int(left[node])))
    return np.array(sorted(found), dtype=np.int64)


def query(forest: RpForest, store: VectorStore, q: np.ndarray, k: int, search_budget: Optional[int] = None) -> List[Neighbor]:
    """Approximate ``k`` nearest rows by cosine distance, ascending.

    ``search_budget`` defaults to ``50 * k`` candidates.
    """
    if k < 1:
        raise ValueError("k must be positive")
    if forest.dim != store.dim:
        raise ValueError(f"forest dimension {forest.dim} != store dimension {store.dim}")
    q = _unit_query(q, forest.dim)
    budget = 50 * k if search_budget is None else search_budget
    rows = candidate_rows(forest, q, max(budget, k))
    return _rank(store, rows, q, k)


# --------------------------------------------------------------------------
# persistence

def _pack(arr: np.ndarray, dtype: str) -> bytes:
    return np.ascontiguousarray(arr, dtype=dtype).tobytes()


def index_to_bytes(forest: RpForest, store: VectorStore, fingerprint: str = "") -> bytes:
    header = {
        "config": {"n_trees": forest.config.n_trees, "max_leaf_size": forest.config.max_leaf_size,
                   "seed": forest.config.seed, "split": forest.config.split},
        "dim": store.dim,
        "rows": len(store),
        "nodes": len(forest.left),
        "splits": forest.normals.shape[0],
        "leaf_rows": len(forest.leaf_rows),
        "trees": forest.n_trees,
        "fingerprint": fingerprint,
        "entity_ids": store.entity_ids,
        "names": store.names,
    }
    blob = json.dumps(header, sort_keys=True, ensure_ascii=True).encode("ascii")
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    buf.write(struct.pack("<II", INDEX_VERSION, len(blob)))
    buf.write(blob)
    buf.write(_pack(store.vectors, "<f8"))
    buf.write(_pack(forest.roots, "<i8"))
    for name in ("left", "right", "split", "leaf_start", "leaf_count"):
        buf.write(_pack(getattr(forest, name), "<i8"))
    buf.write(_pack(forest.offsets, "<f8"))
    buf.write(_pack(forest.normals, "<f8"))
    buf.write(_pack(forest.leaf_rows, "<i8"))
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def index_from_bytes(data: bytes) -> Tuple[RpForest, VectorStore, str]:
    if len(data) < 12 + 32:
        raise IndexFormatError("index file truncated")
    if data[:4] != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic {data[:4]!r}, expected {INDEX_MAGIC!r}")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {version}")
    end = 12 + header_len
    if end > len(data) - 32:
        raise IndexFormatError("index file truncated in header")
    try:
        h = json.loads(data[12:end].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IndexFormatError(f"corrupt index header: {exc}") from None
    dim, n_rows, n_nodes, n_splits, n_leaf = h["dim"], h["rows"], h["nodes"], h["splits"], h["leaf_rows"]
    sizes = [n_rows * dim, h["trees"]] + [n_nodes] * 5 + [n_nodes, n_splits * dim, n_leaf]
    expected = end + 8 * sum(sizes) + 32
    if len(data) != expected:
        raise IndexFormatError(f"index file is {len(data)} bytes, expected {expected}")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IndexFormatError("index checksum mismatch")
    offset = end

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal offset
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()
        offset += 8 * count
        return arr

    vectors = take(n_rows * dim, "<f8").reshape(n_rows, dim)
    roots = take(h["trees"], "<i8")
    left, right, split, leaf_start, leaf_count = (take(n_nodes, "<i8") for _ in range(5))
    offsets = take(n_nodes, "<f8")
    normals = take(n_splits * dim, "<f8").reshape(n_splits, dim)
    leaf_rows = take(n_leaf, "<i8")
    config = ForestConfig(**h["config"])
    forest = RpForest(config, dim, roots, left, right, split, offsets, normals, leaf_start, leaf_count, leaf_rows)
    store = VectorStore.from_unit_vectors(h["entity_ids"], h["names"], vectors)
    return forest, store, h["fingerprint"]


def save_index(forest: RpForest, store: VectorStore, stream: BinaryIO, fingerprint: str = "") -> None:
    stream.write(index_to_bytes(forest, store, fingerprint))


def load_index(stream: BinaryIO) -> Tuple[RpForest, VectorStore, str]:
    return index_from_bytes(stream.read())
