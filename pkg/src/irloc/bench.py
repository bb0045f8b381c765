"""Micro-benchmarks: descriptor distance cost and database add+query throughput."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from irloc.core import DescriptorSet
from irloc.errors import EmptyInputError
from irloc.index import ImageDatabase, transform
from irloc.vocab import Vocabulary, assign_idf, build_vocabulary

REFERENCE_RATIO = 80.0  # L2 vs Hamming cost reported for the original system


@dataclass(frozen=True)
class DistanceReport:
    dim_float: int
    bits_binary: int
    n_pairs: int
    l2_ns_per_pair: float
    hamming_ns_per_pair: float

    @property
    def ratio(self) -> float:
        return self.l2_ns_per_pair / self.hamming_ns_per_pair

    def as_dict(self) -> dict:
        return {**asdict(self), "ratio": self.ratio, "reference_ratio": REFERENCE_RATIO}


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_distances(
    dim_float: int = 256, bits_binary: int = 256, n_pairs: int = 20000, seed: int = 0, repeats: int = 7
) -> DistanceReport:
    """Per-pair cost of batched L2 and Hamming distances over random pairs.

    Both kernels run over the same number of contiguous pairs so the
    comparison reflects arithmetic and memory traffic rather than call
    overhead.
    """
    if n_pairs <= 0:
        raise EmptyInputError("empty benchmark")
    if bits_binary % 64:
        raise ValueError("bits_binary must be a multiple of 64")
    rng = np.random.default_rng(seed)
    fa = rng.standard_normal((n_pairs, dim_float)).astype(np.float32)
    fb = rng.standard_normal((n_pairs, dim_float)).astype(np.float32)
    words = bits_binary // 64
    ba = rng.integers(0, 2**63, (n_pairs, words), dtype=np.uint64, endpoint=True)
    bb = rng.integers(0, 2**63, (n_pairs, words), dtype=np.uint64, endpoint=True)
    diff = np.empty_like(fa)
    x = np.empty_like(ba)
    pc = np.empty(ba.shape, dtype=np.uint8)

    def l2():
        np.subtract(fa, fb, out=diff)
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def ham():
        np.bitwise_xor(ba, bb, out=x)
        np.bitwise_count(x, out=pc)
        # column adds beat a row-wise reduction over only a few words
        acc = pc[:, 0].astype(np.uint16)
        for w in range(1, words):
            acc += pc[:, w]
        return acc

    t_l2 = _best_time(l2, repeats)
    t_ham = _best_time(ham, repeats)
    return DistanceReport(dim_float, bits_binary, n_pairs, t_l2 / n_pairs * 1e9, t_ham / n_pairs * 1e9)


@dataclass(frozen=True)
class DatabaseReport:
    n_entries: int
    features_per_image: int
    seconds_with_di: float
    seconds_without_di: float

    @property
    def images_per_s(self) -> float:
        return self.n_entries / self.seconds_with_di

    @property
    def images_per_s_without_di(self) -> float:
        return self.n_entries / self.seconds_without_di

    def as_dict(self) -> dict:
        return {
            **asdict(self),
            "images_per_s": self.images_per_s,
            "images_per_s_without_di": self.images_per_s_without_di,
        }


def benchmark_vocabulary(dim: int = 256, n_train: int = 20000, k: int = 10, L: int = 5, seed: int = 0) -> Vocabulary:
    rng = np.random.default_rng(seed)
    X = _unit(rng.standard_normal((n_train, dim)))
    return build_vocabulary(X, k, L, seed)


def _unit(x: np.ndarray) -> np.ndarray:
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


def synthetic_images(n: int, per_image: int, dim: int, seed: int = 0) -> list[DescriptorSet]:
    rng = np.random.default_rng(seed)
    return [DescriptorSet(_unit(rng.standard_normal((per_image, dim)))) for _ in range(n)]


def bench_database(
    n_entries: int = 1000,
    features_per_image: int = 500,
    vocab: Vocabulary | None = None,
    seed: int = 0,
    dim: int = 256,
) -> DatabaseReport:
    """Single-threaded add+query throughput: each image is converted, queried
    against the database so far, then appended."""
    if n_entries <= 0:
        raise EmptyInputError("empty benchmark")
    vocab = vocab or benchmark_vocabulary(dim, seed=seed)
    images = synthetic_images(n_entries, features_per_image, vocab.dim, seed + 1)
    vocab = assign_idf(vocab, images[: min(50, n_entries)])

    def run(with_di: bool) -> float:
        db = ImageDatabase(vocab)
        t0 = time.perf_counter()
        for s in images:
            bow, fv = transform(vocab, s, db.di_levels, with_direct_index=with_di)
            db.query(bow, 10)
            db.add(bow, fv)
        return time.perf_counter() - t0

    return DatabaseReport(n_entries, features_per_image, run(True), run(False))
