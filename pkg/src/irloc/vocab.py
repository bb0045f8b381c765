"""Hierarchical k-means / k-medians vocabulary trees.

Float descriptors are clustered with squared-L2 Lloyd iterations and mean
centres; binary descriptors with Hamming assignment and bitwise-majority
centres (k-medians in Hamming space). Seeding is k-means++ driven by the
portable xorshift64* generator, so a (pool, k, L, seed) tuple always yields
the same tree bytes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from irloc.core import (
    BINARY,
    FLOAT,
    DescriptorSet,
    as_descriptor_array,
    centroid,
    hamming_matrix,
    kind_of,
    sq_l2_matrix,
)
from irloc.errors import EmptyInputError, FormatError, IrlocError, SignatureError
from irloc.rng import XorShift64Star

VOC_MAGIC = b"VOC1"
NO_PARENT = 0xFFFFFFFF

DEFAULT_K = 10
DEFAULT_LEVELS = 5
DEFAULT_MAX_ITERS = 11


# ---------------------------------------------------------------- k-means


@dataclass
class KMeansResult:
    centers: np.ndarray
    assignments: np.ndarray
    costs: list[float] = field(default_factory=list)
    iterations: int = 0


def _cost_matrix(X: np.ndarray, C: np.ndarray, kind: str) -> np.ndarray:
    """Lloyd objective per (point, centre): squared L2 or plain Hamming."""
    if kind == BINARY:
        return hamming_matrix(X, C).astype(np.float64)
    return sq_l2_matrix(X, C)


def _seed_plusplus(X: np.ndarray, k: int, kind: str, rng: XorShift64Star) -> list[int]:
    n = len(X)
    chosen = [rng.randbelow(n)]
    d = _cost_matrix(X, X[chosen[0] : chosen[0] + 1], kind)[:, 0]
    w = d * d if kind == BINARY else d.copy()
    for _ in range(1, k):
        total = float(w.sum())
        if total <= 0.0:
            idx = rng.randbelow(n)
        else:
            cum = np.cumsum(w)
            idx = int(np.searchsorted(cum, rng.uniform() * cum[-1], side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d = _cost_matrix(X, X[idx : idx + 1], kind)[:, 0]
        np.minimum(w, d * d if kind == BINARY else d, out=w)
    return chosen


def _update_centers(X: np.ndarray, assign: np.ndarray, centers: np.ndarray, kind: str):
    """Recompute centres in place; returns the ids of clusters left empty."""
    empty = []
    order = np.argsort(assign, kind="stable")
    bounds = np.searchsorted(assign[order], np.arange(len(centers) + 1))
    for c in range(len(centers)):
        members = order[bounds[c] : bounds[c + 1]]
        if len(members) == 0:
            empty.append(c)
            continue
        if kind == BINARY:
            centers[c] = centroid(X[members])
        else:
            centers[c] = X[members].mean(axis=0)
    return empty


def kmeans(
    descs,
    k: int,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    *,
    rng: XorShift64Star | None = None,
) -> KMeansResult:
    """Cluster descriptors into at most ``k`` groups.

    ``max_iters`` counts the seeding assignment as the first iteration. When
    there are no more points than clusters every point is its own centre.
    ``costs`` holds the objective after every assignment step and is checked
    to be non-increasing.
    """
    if k < 1:
        raise IrlocError("k must be >= 1")
    X = as_descriptor_array(descs)
    if X.ndim != 2 or len(X) == 0:
        raise EmptyInputError("kmeans needs a non-empty 2-D descriptor array")
    kind = kind_of(X)
    n = len(X)
    if n <= k:
        return KMeansResult(X.copy(), np.arange(n, dtype=np.int64), [0.0], 0)
    if rng is None:
        rng = XorShift64Star(seed)
    work = X.astype(np.float64) if kind == FLOAT else X

    centers = work[_seed_plusplus(work, k, kind, rng)].copy()
    D = _cost_matrix(work, centers, kind)
    assign = np.argmin(D, axis=1)
    cost = float(D[np.arange(n), assign].sum())
    costs = [cost]
    it = 1
    while it < max_iters:
        it += 1
        empty = _update_centers(work, assign, centers, kind)
        if empty:
            # reseed from the points worst served by their current centre
            own = _cost_matrix(work, centers, kind)[np.arange(n), assign]
            taken: set[int] = set()
            for c in empty:
                for idx in np.argsort(-own, kind="stable"):
                    if int(idx) not in taken:
                        taken.add(int(idx))
                        centers[c] = work[idx]
                        break
        D = _cost_matrix(work, centers, kind)
        new_assign = np.argmin(D, axis=1)
        cost = float(D[np.arange(n), new_assign].sum())
        if cost > costs[-1] * (1 + 1e-9) + 1e-9:
            raise RuntimeError(f"k-means cost increased: {costs[-1]!r} -> {cost!r}")
        costs.append(cost)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    out = as_descriptor_array(centers, kind)
    return KMeansResult(out, assign.astype(np.int64), costs, it)


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class VocabNode:
    id: int
    parent: int | None
    children: tuple[int, ...]
    center: np.ndarray
    weight: float
    word_id: int | None


@dataclass(eq=False)
class Vocabulary:
    """k-ary tree stored breadth-first; node 0 is the root (zero centre)."""

    k: int
    L: int
    kind: str
    dim: int
    parent: np.ndarray  # int64, -1 for the root
    is_leaf: np.ndarray  # bool
    weights: np.ndarray  # float32, IDF at leaves
    centers: np.ndarray  # (n_nodes, dim) in descriptor storage type

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.is_leaf = np.asarray(self.is_leaf, dtype=bool)
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.centers = as_descriptor_array(self.centers, self.kind)
        n = len(self.parent)
        if not (len(self.is_leaf) == len(self.weights) == len(self.centers) == n) or n == 0:
            raise SignatureError("inconsistent vocabulary node arrays")
        if self.centers.shape[1] != self.dim:
            raise SignatureError("centre dimension differs from vocabulary dim")
        self._build_tables()

    def _build_tables(self):
        n = len(self.parent)
        p = self.parent[1:]
        if self.parent[0] != -1 or np.any(p < 0) or np.any(p >= np.arange(1, n)) or np.any(np.diff(p) < 0):
            raise FormatError("node parents are not in breadth-first order")
        counts = np.bincount(self.parent[1:], minlength=n)
        if counts.max(initial=0) > self.k:
            raise FormatError("a node has more children than the branching factor")
        if np.any(counts[self.is_leaf] > 0) or np.any(counts[~self.is_leaf] == 0):
            raise FormatError("leaf flags disagree with tree structure")
        child_table = np.full((n, self.k), -1, dtype=np.int64)
        fill = np.zeros(n, dtype=np.int64)
        for c in range(1, n):
            p = self.parent[c]
            child_table[p, fill[p]] = c
            fill[p] += 1
        depth = np.zeros(n, dtype=np.int64)
        for c in range(1, n):
            depth[c] = depth[self.parent[c]] + 1
        if depth.max() > self.L:
            raise FormatError("tree deeper than its declared level count")
        self.child_table = child_table
        self.depth = depth
        self.leaf_nodes = np.flatnonzero(self.is_leaf)
        self.word_of_node = np.full(n, -1, dtype=np.int64)
        self.word_of_node[self.leaf_nodes] = np.arange(len(self.leaf_nodes))
        if self.kind == FLOAT:
            c64 = self.centers.astype(np.float64)
            self._center_sqnorm32 = (c64 * c64).sum(1).astype(np.float32)

    @property
    def node_count(self) -> int:
        return len(self.parent)

    @property
    def word_count(self) -> int:
        return len(self.leaf_nodes)

    def word_weights(self) -> np.ndarray:
        return self.weights[self.leaf_nodes]

    def node(self, i: int) -> VocabNode:
        kids = tuple(int(c) for c in self.child_table[i] if c >= 0)
        w = int(self.word_of_node[i])
        return VocabNode(
            i,
            None if self.parent[i] < 0 else int(self.parent[i]),
            kids,
            self.centers[i],
            float(self.weights[i]),
            None if w < 0 else w,
        )

    def check_signature(self, kind: str, dim: int) -> None:
        if kind != self.kind or dim != self.dim:
            raise SignatureError(
                f"descriptor signature {kind}/{dim} does not match vocabulary {self.kind}/{self.dim}"
            )

    def to_bytes(self) -> bytes:
        return encode_vocabulary(self)

    @cached_property
    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    def with_weights(self, weights: np.ndarray) -> "Vocabulary":
        return Vocabulary(self.k, self.L, self.kind, self.dim, self.parent, self.is_leaf, weights, self.centers)

    # -------------------------------------------------------- lookup

    def _child_distances(self, X: np.ndarray, kids: np.ndarray) -> np.ndarray:
        valid = kids >= 0
        safe = np.where(valid, kids, 0)
        C = self.centers[safe]  # (n, k, dim)
        if self.kind == BINARY:
            A = X.view(np.uint64) if X.shape[1] % 8 == 0 else X
            B = C.view(np.uint64) if X.shape[1] % 8 == 0 else C
            d = np.bitwise_count(np.bitwise_xor(A[:, None, :], B)).sum(axis=2, dtype=np.int64)
            d = d.astype(np.float64)
        else:
            # |x|^2 is common to all children and dropped; float32 for speed,
            # then rows whose two best children are close get an exact recheck
            d = (self._center_sqnorm32[safe] - 2.0 * (C @ X[:, :, None])[..., 0]).astype(np.float64)
            d[~valid] = np.inf
            if d.shape[1] > 1:
                part = np.partition(d, 1, axis=1)
                scale = np.abs(part[:, :2]).max(axis=1) + (X.astype(np.float64) ** 2).sum(1)
                close = np.flatnonzero(part[:, 1] - part[:, 0] <= 1e-4 * scale)
                if len(close):
                    diff = C[close].astype(np.float64) - X[close, None, :].astype(np.float64)
                    d[close] = (diff * diff).sum(-1)
        d[~valid] = np.inf
        return d

    def quantize_many(self, descs) -> tuple[np.ndarray, np.ndarray]:
        """Greedy descent for every row. Returns (leaf node ids, paths).

        ``paths`` has shape (n, L + 1); entry [i, j] is the node visited at
        depth j, or -1 below the leaf.
        """
        X = as_descriptor_array(descs)
        if X.ndim != 2:
            raise SignatureError("expected a 2-D descriptor array")
        self.check_signature(kind_of(X), X.shape[1])
        n = len(X)
        paths = np.full((n, self.L + 1), -1, dtype=np.int64)
        cur = np.zeros(n, dtype=np.int64)
        paths[:, 0] = 0
        active = np.flatnonzero(~self.is_leaf[cur])
        depth = 0
        while len(active):
            depth += 1
            kids = self.child_table[cur[active]]
            d = self._child_distances(X[active], kids)
            best = kids[np.arange(len(active)), np.argmin(d, axis=1)]
            cur[active] = best
            paths[active, depth] = best
            active = active[~self.is_leaf[best]]
        return cur, paths


def quantize(vocab: Vocabulary, d) -> tuple[int, float, list[int]]:
    """Word id, leaf IDF weight and visited node ids for a single descriptor."""
    arr = as_descriptor_array(d)
    if arr.ndim != 1:
        raise SignatureError("quantize takes one descriptor; use quantize_many for sets")
    leaves, paths = vocab.quantize_many(arr[None, :])
    leaf = int(leaves[0])
    path = [int(p) for p in paths[0] if p >= 0]
    return int(vocab.word_of_node[leaf]), float(vocab.weights[leaf]), path


# ---------------------------------------------------------------- training


@dataclass
class TrainingPool:
    images: list[DescriptorSet]
    pairs_consumed: int = 0
    features_offered: int = 0

    def __post_init__(self):
        sigs = {(s.kind, s.dim) for s in self.images}
        if len(sigs) > 1:
            raise SignatureError(f"mixed descriptor signatures in pool: {sorted(sigs)}")

    @property
    def signature(self) -> tuple[str, int]:
        s = self.images[0]
        return s.kind, s.dim

    def stacked(self) -> np.ndarray:
        return np.concatenate([s.descriptors for s in self.images], axis=0)

    @property
    def feature_count(self) -> int:
        return sum(len(s) for s in self.images)


def filter_matched_features(frame_a: DescriptorSet, frame_b: DescriptorSet, matches) -> DescriptorSet:
    """Keep the frame-A side of each match, in match order."""
    m = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    if len(m) == 0:
        return frame_a.subset(np.zeros(0, dtype=np.int64))
    ia, ib = m[:, 0], m[:, 1]
    if ia.min() < 0 or ia.max() >= len(frame_a) or ib.min() < 0 or ib.max() >= len(frame_b):
        raise IrlocError(
            f"match index out of range for frames of size {len(frame_a)} and {len(frame_b)}"
        )
    return frame_a.subset(ia)


def build_training_pool(pairs: Iterable[tuple[DescriptorSet, DescriptorSet, np.ndarray]]) -> TrainingPool:
    images = []
    n_pairs = 0
    offered = 0
    for a, b, m in pairs:
        n_pairs += 1
        offered += len(a)
        kept = filter_matched_features(a, b, m)
        if len(kept):
            images.append(kept)
    return TrainingPool(images, n_pairs, offered)


def build_vocabulary(
    pool: TrainingPool | Sequence[DescriptorSet] | np.ndarray,
    k: int = DEFAULT_K,
    L: int = DEFAULT_LEVELS,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
) -> Vocabulary:
    """Top-down clustering; leaves become words in breadth-first order.

    Leaf weights start at 1.0 until :func:`assign_idf` is run.
    """
    if k < 2 or L < 1:
        raise IrlocError("need k >= 2 and L >= 1")
    if isinstance(pool, np.ndarray):
        X = as_descriptor_array(pool)
    else:
        images = pool.images if isinstance(pool, TrainingPool) else list(pool)
        if not images:
            raise EmptyInputError("empty training pool")
        TrainingPool(images)  # signature check
        X = np.concatenate([s.descriptors for s in images], axis=0)
    if X.ndim != 2 or len(X) == 0:
        raise EmptyInputError("empty training pool")
    kind = kind_of(X)
    rng = XorShift64Star(seed)

    parent = [-1]
    centers = [np.zeros(X.shape[1], dtype=X.dtype)]
    leaf = [False]
    queue = [(0, np.arange(len(X)), 0)]
    head = 0
    while head < len(queue):
        node, members, depth = queue[head]
        head += 1
        if depth == L or len(members) <= 1:
            leaf[node] = True
            continue
        res = kmeans(X[members], k, max_iters=max_iters, rng=rng)
        for c in range(len(res.centers)):
            sub = members[res.assignments == c]
            if len(sub) == 0:
                continue
            cid = len(parent)
            parent.append(node)
            centers.append(res.centers[c])
            leaf.append(False)
            queue.append((cid, sub, depth + 1))
    is_leaf = np.array(leaf)
    weights = np.where(is_leaf, 1.0, 0.0)
    return Vocabulary(k, L, kind, X.shape[1], np.array(parent), is_leaf, weights, np.stack(centers))


def assign_idf(vocab: Vocabulary, images: Sequence[DescriptorSet]) -> Vocabulary:
    """IDF weights ln(N / n_i); words seen in no image get 0."""
    if len(images) == 0:
        raise EmptyInputError("assign_idf needs at least one image")
    doc_freq = np.zeros(vocab.word_count, dtype=np.int64)
    for s in images:
        vocab.check_signature(s.kind, s.dim)
        if len(s) == 0:
            continue
        leaves, _ = vocab.quantize_many(s.descriptors)
        doc_freq[np.unique(vocab.word_of_node[leaves])] += 1
    N = len(images)
    idf = np.zeros(vocab.word_count, dtype=np.float64)
    seen = doc_freq > 0
    idf[seen] = np.log(N / doc_freq[seen])
    weights = np.zeros(vocab.node_count, dtype=np.float64)
    weights[vocab.leaf_nodes] = idf
    return vocab.with_weights(weights)


# ---------------------------------------------------------------- VOC1


_VOC_HEADER = 4 + struct.calcsize("<BHIII")


def encode_vocabulary(v: Vocabulary) -> bytes:
    code = 0 if v.kind == BINARY else 1
    head = VOC_MAGIC + struct.pack("<BHIII", code, v.dim, v.k, v.L, v.node_count)
    n = v.node_count
    par = np.where(v.parent < 0, NO_PARENT, v.parent).astype("<u4")
    row = v.dim if v.kind == BINARY else 4 * v.dim
    rec = np.dtype([("parent", "<u4"), ("leaf", "u1"), ("weight", "<f4"), ("center", "V%d" % row)])
    arr = np.zeros(n, dtype=rec)
    arr["parent"] = par
    arr["leaf"] = v.is_leaf.astype(np.uint8)
    arr["weight"] = v.weights
    cen = v.centers if v.kind == BINARY else v.centers.astype("<f4")
    arr["center"] = np.ascontiguousarray(cen).view("V%d" % row).reshape(n)
    return head + arr.tobytes()


def decode_vocabulary(buf: bytes) -> Vocabulary:
    if buf[:4] != VOC_MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < _VOC_HEADER:
        raise FormatError(f"truncated header: need {_VOC_HEADER} bytes, got {len(buf)}", 4)
    code, dim, k, L, n = struct.unpack_from("<BHIII", buf, 4)
    if code not in (0, 1):
        raise FormatError(f"unknown dtype code {code}", 4)
    if dim == 0 or k < 1 or L < 1 or n == 0:
        raise FormatError("invalid vocabulary header values", 4)
    kind = BINARY if code == 0 else FLOAT
    row = dim if kind == BINARY else 4 * dim
    size = 9 + row
    body = len(buf) - _VOC_HEADER
    if body != n * size:
        raise FormatError(
            f"expected {n} nodes ({n * size} bytes) but found {body // size} complete nodes ({body} bytes)",
            _VOC_HEADER,
        )
    rec = np.dtype([("parent", "<u4"), ("leaf", "u1"), ("weight", "<f4"), ("center", "V%d" % row)])
    arr = np.frombuffer(buf, dtype=rec, count=n, offset=_VOC_HEADER)
    parent = arr["parent"].astype(np.int64)
    parent[parent == NO_PARENT] = -1
    raw = np.frombuffer(arr["center"].tobytes(), dtype=np.uint8 if kind == BINARY else "<f4")
    centers = raw.reshape(n, dim)
    weights = arr["weight"].astype(np.float32)
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise FormatError("negative or non-finite node weight", _VOC_HEADER)
    return Vocabulary(int(k), int(L), kind, int(dim), parent, arr["leaf"].astype(bool), weights, centers)


def save_vocabulary(v: Vocabulary, path) -> None:
    Path(path).write_bytes(encode_vocabulary(v))


def load_vocabulary(path) -> Vocabulary:
    return decode_vocabulary(Path(path).read_bytes())

