"""Bag-of-words vectors, direct index and the inverted-file image database."""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from itertools import chain
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from irloc.core import DescriptorSet, decode_descriptor_set, encode_descriptor_set
from irloc.errors import FingerprintMismatchError, FormatError, IrlocError, NormalizationError
from irloc.vocab import Vocabulary

IDB_MAGIC = b"IDB1"
NO_BLOB = 0xFFFFFFFFFFFFFFFF
DEFAULT_DI_LEVELS = 2
NORM_TOL = 1e-5


@dataclass(frozen=True, eq=False)
class BowVector:
    """Sparse word -> weight map, sorted by word id, zero weights removed."""

    words: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.words, dtype=np.int64).reshape(-1)
        v = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(w) != len(v):
            raise IrlocError("word and weight arrays differ in length")
        if len(w) > 1 and np.any(np.diff(w) <= 0):
            order = np.argsort(w, kind="stable")
            w, v = w[order], v[order]
            if np.any(np.diff(w) == 0):
                raise IrlocError("duplicate word ids in BowVector")
        keep = v != 0
        object.__setattr__(self, "words", w[keep])
        object.__setattr__(self, "weights", v[keep])

    @classmethod
    def from_dict(cls, d: dict[int, float]) -> "BowVector":
        items = sorted(d.items())
        return cls(np.array([k for k, _ in items], dtype=np.int64), np.array([x for _, x in items]))

    def to_dict(self) -> dict[int, float]:
        return dict(zip(self.words.tolist(), self.weights.tolist()))

    def __len__(self) -> int:
        return len(self.words)

    def l1_norm(self) -> float:
        return float(np.abs(self.weights).sum())

    def is_normalized(self) -> bool:
        return len(self) == 0 or abs(self.l1_norm() - 1.0) <= NORM_TOL

    def normalized(self) -> "BowVector":
        n = self.l1_norm()
        if n == 0:
            return self
        return BowVector(self.words, self.weights / n)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BowVector):
            return NotImplemented
        return np.array_equal(self.words, other.words) and np.array_equal(self.weights, other.weights)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    """Direct index: node id -> ascending feature indices."""

    buckets: dict[int, np.ndarray]

    def __len__(self) -> int:
        return len(self.buckets)

    def nodes(self) -> list[int]:
        return sorted(self.buckets)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        if self.nodes() != other.nodes():
            return False
        return all(np.array_equal(self.buckets[n], other.buckets[n]) for n in self.buckets)


def transform(
    vocab: Vocabulary, s: DescriptorSet, di_levels: int = DEFAULT_DI_LEVELS, *, with_direct_index: bool = True
) -> tuple[BowVector, FeatureVector]:
    """TF-IDF BoW vector (L1-normalised) and the direct index of one image.

    The direct-index node of a feature is the ancestor ``di_levels`` above its
    leaf (clamped at the root).
    """
    if not 0 <= di_levels <= vocab.L:
        raise IrlocError(f"di_levels must lie in [0, {vocab.L}]")
    vocab.check_signature(s.kind, s.dim)
    if len(s) == 0:
        return BowVector(np.zeros(0, np.int64), np.zeros(0)), FeatureVector({})
    leaves, paths = vocab.quantize_many(s.descriptors)
    words = vocab.word_of_node[leaves]
    uniq, counts = np.unique(words, return_counts=True)
    idf = vocab.weights[vocab.leaf_nodes[uniq]].astype(np.float64)
    vals = counts / len(s) * idf
    bow = BowVector(uniq, vals).normalized()
    if not with_direct_index:
        return bow, FeatureVector({})
    level = np.maximum(vocab.depth[leaves] - di_levels, 0)
    di_nodes = paths[np.arange(len(s)), level]
    order = np.argsort(di_nodes, kind="stable")
    sorted_nodes = di_nodes[order]
    cuts = np.flatnonzero(np.diff(sorted_nodes)) + 1
    buckets = {
        int(chunk_nodes[0]): idx
        for chunk_nodes, idx in zip(np.split(sorted_nodes, cuts), np.split(order, cuts))
    }
    return bow, FeatureVector(buckets)


def l1_score(u: BowVector, v: BowVector) -> float:
    """1 - |u - v|_1 / 2 for L1-normalised vectors; 0 when either is empty."""
    for x in (u, v):
        if not x.is_normalized():
            raise NormalizationError(f"BowVector not L1-normalised (norm {x.l1_norm():.6g})")
    if len(u) == 0 or len(v) == 0:
        return 0.0
    words = np.union1d(u.words, v.words)
    a = np.zeros(len(words))
    b = np.zeros(len(words))
    a[np.searchsorted(words, u.words)] = u.weights
    b[np.searchsorted(words, v.words)] = v.weights
    s = 1.0 - 0.5 * float(np.abs(a - b).sum())
    return min(1.0, max(0.0, s))


class _ReadWriteLock:
    """Many concurrent readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0

    @contextmanager
    def read(self):
        with self._cond:
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._readers:
                self._cond.wait()
            yield


class LazyDescriptors:
    """DSC1 record kept as raw bytes and decoded on first access."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self._set: DescriptorSet | None = None

    def get(self) -> DescriptorSet:
        if self._set is None:
            self._set, _ = decode_descriptor_set(self.raw, 0)
        return self._set


@dataclass
class Entry:
    bow: BowVector
    fv: FeatureVector
    descriptors: DescriptorSet | LazyDescriptors | None = None


class ImageDatabase:
    """Append-only inverted file. Adds are serialised; queries see a snapshot."""

    def __init__(self, fingerprint: bytes | Vocabulary, di_levels: int = DEFAULT_DI_LEVELS):
        if isinstance(fingerprint, Vocabulary):
            self.vocab: Vocabulary | None = fingerprint
            fingerprint = fingerprint.fingerprint
        else:
            self.vocab = None
        if len(fingerprint) != 32:
            raise IrlocError("vocabulary fingerprint must be 32 bytes")
        self.fingerprint = bytes(fingerprint)
        self.di_levels = di_levels
        self.entries: list[Entry] = []
        self._postings: dict[int, tuple[list[int], list[float]]] = {}
        self._lock = _ReadWriteLock()

    def __len__(self) -> int:
        return len(self.entries)

    def attach(self, vocab: Vocabulary) -> None:
        if vocab.fingerprint != self.fingerprint:
            raise FingerprintMismatchError("vocabulary fingerprint does not match database")
        self.vocab = vocab

    def add(self, bow: BowVector, fv: FeatureVector | None = None, descriptors=None) -> int:
        with self._lock.write():
            eid = len(self.entries)
            for w, x in zip(bow.words.tolist(), bow.weights.tolist()):
                ids, ws = self._postings.setdefault(w, ([], []))
                ids.append(eid)
                ws.append(x)
            self.entries.append(Entry(bow, fv if fv is not None else FeatureVector({}), descriptors))
            return eid

    def add_image(self, s: DescriptorSet, keep_descriptors: bool = True) -> int:
        if self.vocab is None:
            raise IrlocError("database has no vocabulary attached")
        bow, fv = transform(self.vocab, s, self.di_levels)
        return self.add(bow, fv, s if keep_descriptors else None)

    def postings(self, word: int) -> list[tuple[int, float]]:
        ids, ws = self._postings.get(word, ([], []))
        return list(zip(ids, ws))

    def descriptors(self, entry_id: int) -> DescriptorSet | None:
        d = self.entries[entry_id].descriptors
        if isinstance(d, LazyDescriptors):
            return d.get()
        return d

    def query(
        self, bow: BowVector, max_results: int | None = None, exclude: tuple[int, int] | range | None = None
    ) -> list[tuple[int, float]]:
        """Ranked (entry id, score) pairs, best first, ties by lower id.

        Only entries sharing a word with ``bow`` are scored. For positive
        L1-normalised vectors ``1 - |u - v|/2`` equals the sum over shared
        words of ``min(u_i, v_i)``, which the inverted file accumulates.
        ``exclude`` is a half-open id range [lo, hi).
        """
        if not bow.is_normalized():
            raise NormalizationError(f"query BowVector not L1-normalised (norm {bow.l1_norm():.6g})")
        with self._lock.read():
            return self._query(bow, max_results, exclude)

    def _query(self, bow, max_results, exclude):
        limit = len(self.entries)
        id_lists, w_lists, q_lists = [], [], []
        for w, q in zip(bow.words.tolist(), bow.weights.tolist()):
            p = self._postings.get(w)
            if p is not None:
                id_lists.append(p[0])
                w_lists.append(p[1])
                q_lists.append(q)
        if not id_lists:
            return []
        lens = np.fromiter(map(len, id_lists), dtype=np.int64, count=len(id_lists))
        ids = np.fromiter(chain.from_iterable(id_lists), dtype=np.int64, count=int(lens.sum()))
        ws = np.fromiter(chain.from_iterable(w_lists), dtype=np.float64, count=len(ids))
        qs = np.repeat(np.asarray(q_lists), lens)
        keep = ids < limit
        if exclude is not None:
            lo, hi = (exclude.start, exclude.stop) if isinstance(exclude, range) else exclude
            keep &= (ids < lo) | (ids >= hi)
        ids, contrib = ids[keep], np.minimum(qs[keep], ws[keep])
        if len(ids) == 0:
            return []
        scores = np.bincount(ids, contrib, minlength=limit)
        cand = np.flatnonzero(np.bincount(ids, minlength=limit))
        cs = np.minimum(scores[cand], 1.0)
        order = np.lexsort((cand, -cs))
        if max_results is not None:
            order = order[:max_results]
        return [(int(e), float(x)) for e, x in zip(cand[order], cs[order])]

    # ------------------------------------------------------------ IDB1

    def to_bytes(self) -> bytes:
        head = [IDB_MAGIC, self.fingerprint, struct.pack("<I", len(self.entries))]
        blobs: list[bytes] = []
        blob_pos = 0
        for e in self.entries:
            head.append(struct.pack("<I", len(e.bow)))
            rec = np.empty(len(e.bow), dtype=[("w", "<u4"), ("x", "<f4")])
            rec["w"] = e.bow.words
            rec["x"] = e.bow.weights
            head.append(rec.tobytes())
            nodes = e.fv.nodes()
            head.append(struct.pack("<I", len(nodes)))
            for node in nodes:
                idx = e.fv.buckets[node]
                head.append(struct.pack("<II", node, len(idx)))
                head.append(np.asarray(idx, dtype="<u4").tobytes())
            if e.descriptors is None:
                head.append(struct.pack("<Q", NO_BLOB))
            else:
                raw = e.descriptors.raw if isinstance(e.descriptors, LazyDescriptors) else encode_descriptor_set(e.descriptors)
                head.append(struct.pack("<Q", blob_pos))
                blobs.append(raw)
                blob_pos += len(raw)
        return b"".join(head + blobs)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, vocab: Vocabulary | None = None, di_levels: int = DEFAULT_DI_LEVELS) -> "ImageDatabase":
        r = _Reader(buf)
        if r.take(4, "magic") != IDB_MAGIC:
            raise FormatError("bad magic", 0)
        fp = r.take(32, "vocabulary hash")
        if vocab is not None and vocab.fingerprint != fp:
            raise FingerprintMismatchError("database was built with a different vocabulary")
        db = cls(fp, di_levels)
        db.vocab = vocab
        (count,) = r.unpack("<I", "entry count")
        pending: list[tuple[BowVector, FeatureVector, int]] = []
        for _ in range(count):
            (nw,) = r.unpack("<I", "bow size")
            rec = np.frombuffer(r.take(8 * nw, "bow pairs"), dtype=[("w", "<u4"), ("x", "<f4")])
            bow = BowVector(rec["w"].astype(np.int64), rec["x"].astype(np.float64))
            (nn,) = r.unpack("<I", "feature vector size")
            buckets = {}
            for _ in range(nn):
                node, n = r.unpack("<II", "feature vector node")
                buckets[node] = np.frombuffer(r.take(4 * n, "feature indices"), dtype="<u4").astype(np.int64)
            (off,) = r.unpack("<Q", "descriptor offset")
            pending.append((bow, FeatureVector(buckets), off))
        blob_start = r.pos
        for bow, fv, off in pending:
            desc = None
            if off != NO_BLOB:
                start = blob_start + off
                if start >= len(buf):
                    raise FormatError("descriptor blob offset past end of file", start)
                _, end = decode_descriptor_set(buf, start)
                desc = LazyDescriptors(buf[start:end])
            db.add(bow, fv, desc)
        return db

    @classmethod
    def load(cls, path, vocab: Vocabulary | None = None, di_levels: int = DEFAULT_DI_LEVELS) -> "ImageDatabase":
        return cls.from_bytes(Path(path).read_bytes(), vocab, di_levels)

    def __iter__(self) -> Iterator[Entry]:
        return iter(self.entries)


class _Reader:
    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} available", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def db_add(db: ImageDatabase, bow: BowVector, fv: FeatureVector | None = None, set_ref=None) -> int:
    return db.add(bow, fv, set_ref)


def db_query(db: ImageDatabase, bow: BowVector, max_results: int | None = None, exclude=None):
    return db.query(bow, max_results, exclude)
