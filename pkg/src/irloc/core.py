"""Descriptors, metrics, centroids and the DSC1 / MCH1 file formats.

A single descriptor is a 1-D numpy array: ``uint8`` means a packed binary
descriptor (``dim`` bytes), ``float32`` means a float descriptor of ``dim``
elements. Sets of descriptors are stacked row-wise in a 2-D array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from irloc.errors import EmptyInputError, FormatError, SignatureError

BINARY = "binary"
FLOAT = "float"

_DTYPE_CODES = {BINARY: 0, FLOAT: 1}
_CODE_DTYPES = {0: BINARY, 1: FLOAT}

DSC_MAGIC = b"DSC1"
MCH_MAGIC = b"MCH1"
_FLAG_KEYPOINTS = 0x01
_FLAG_LANDMARKS = 0x02


def kind_of(arr: np.ndarray) -> str:
    if arr.dtype == np.uint8:
        return BINARY
    if arr.dtype in (np.float32, np.float64):
        return FLOAT
    raise SignatureError(f"unsupported descriptor element type {arr.dtype}")


def as_descriptor_array(data, kind: str | None = None) -> np.ndarray:
    """Coerce to the canonical storage type: uint8 for binary, float32 for float."""
    arr = np.asarray(data)
    if kind is None:
        kind = kind_of(arr)
    if kind == BINARY:
        return np.ascontiguousarray(arr, dtype=np.uint8)
    if kind == FLOAT:
        return np.ascontiguousarray(arr, dtype=np.float32)
    raise SignatureError(f"unknown descriptor kind {kind!r}")


def _check_pair(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    ka, kb = kind_of(a), kind_of(b)
    if ka != kind or kb != kind:
        raise SignatureError(f"expected two {kind} descriptors, got {ka} and {kb}")
    if a.shape != b.shape or a.ndim != 1:
        raise SignatureError(f"descriptor shapes differ: {a.shape} vs {b.shape}")


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    _check_pair(a, b, BINARY)
    return int(np.bitwise_count(np.bitwise_xor(a, b)).sum())


def l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    _check_pair(a, b, FLOAT)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise SignatureError("non-finite float descriptor")
    d = a.astype(np.float64) - b.astype(np.float64)
    return float(np.sqrt(np.dot(d, d)))


def distance(a: np.ndarray, b: np.ndarray) -> float:
    if kind_of(np.asarray(a)) == BINARY:
        return float(hamming_distance(a, b))
    return l2_distance(a, b)


def _as_u64_words(x: np.ndarray) -> np.ndarray:
    if x.shape[-1] % 8 == 0 and x.flags.c_contiguous:
        return x.view(np.uint64)
    return x


def hamming_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """All-pairs Hamming distances, shape (len(A), len(B)), int64."""
    A = _as_u64_words(np.ascontiguousarray(A, dtype=np.uint8))
    B = _as_u64_words(np.ascontiguousarray(B, dtype=np.uint8))
    x = np.bitwise_xor(A[:, None, :], B[None, :, :])
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


def sq_l2_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances in float64, clamped at zero."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    d = (A * A).sum(1)[:, None] - 2.0 * (A @ B.T) + (B * B).sum(1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def distance_matrix(A: np.ndarray, B: np.ndarray, kind: str) -> np.ndarray:
    if kind == BINARY:
        return hamming_matrix(A, B).astype(np.float64)
    return np.sqrt(sq_l2_matrix(A, B))


def centroid(members: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """Mean for float descriptors, strict bitwise majority for binary ones.

    A bit of a binary centroid is set only when more than half the members set
    it, so a 1/1 tie resolves to 0.
    """
    if len(members) == 0:
        raise EmptyInputError("centroid of an empty set")
    arr = np.asarray(members) if not isinstance(members, np.ndarray) else members
    if arr.ndim != 2:
        arr = np.stack([np.asarray(m) for m in members])
    if kind_of(arr) == BINARY:
        counts = np.unpackbits(arr, axis=1).sum(axis=0, dtype=np.int64)
        bits = (2 * counts > arr.shape[0]).astype(np.uint8)
        return np.packbits(bits)
    return arr.astype(np.float64).mean(axis=0).astype(arr.dtype)


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """Descriptors of one image, optionally with keypoints and landmark ids."""

    descriptors: np.ndarray
    keypoints: np.ndarray | None = None
    landmark_ids: np.ndarray | None = None

    def __post_init__(self):
        d = self.descriptors
        if d.ndim != 2:
            raise SignatureError("descriptors must be a 2-D array")
        object.__setattr__(self, "descriptors", as_descriptor_array(d))
        if self.keypoints is not None:
            kp = np.ascontiguousarray(self.keypoints, dtype=np.float32).reshape(-1, 2)
            if len(kp) != len(d):
                raise SignatureError("keypoint count differs from descriptor count")
            object.__setattr__(self, "keypoints", kp)
        if self.landmark_ids is not None:
            ids = np.ascontiguousarray(self.landmark_ids, dtype=np.uint32).reshape(-1)
            if len(ids) != len(d):
                raise SignatureError("landmark id count differs from descriptor count")
            object.__setattr__(self, "landmark_ids", ids)

    @classmethod
    def empty(cls, kind: str, dim: int) -> "DescriptorSet":
        dt = np.uint8 if kind == BINARY else np.float32
        return cls(np.zeros((0, dim), dtype=dt))

    @property
    def kind(self) -> str:
        return kind_of(self.descriptors)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self) -> int:
        return self.descriptors.shape[0]

    def subset(self, idx) -> "DescriptorSet":
        idx = np.asarray(idx, dtype=np.int64)
        return DescriptorSet(
            self.descriptors[idx],
            None if self.keypoints is None else self.keypoints[idx],
            None if self.landmark_ids is None else self.landmark_ids[idx],
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, DescriptorSet):
            return NotImplemented
        return encode_descriptor_set(self) == encode_descriptor_set(other)


# ---------------------------------------------------------------- DSC1


def encode_descriptor_set(s: DescriptorSet) -> bytes:
    n = len(s)
    if s.dim > 0xFFFF:
        raise SignatureError(f"dimension {s.dim} does not fit in u16")
    parts = [DSC_MAGIC, struct.pack("<BHI", _DTYPE_CODES[s.kind], s.dim, n)]
    if s.kind == BINARY:
        parts.append(s.descriptors.tobytes())
    else:
        parts.append(s.descriptors.astype("<f4").tobytes())
    flags = (_FLAG_KEYPOINTS if s.keypoints is not None else 0) | (
        _FLAG_LANDMARKS if s.landmark_ids is not None else 0
    )
    parts.append(struct.pack("<B", flags))
    if s.keypoints is not None:
        parts.append(s.keypoints.astype("<f4").tobytes())
    if s.landmark_ids is not None:
        parts.append(s.landmark_ids.astype("<u4").tobytes())
    return b"".join(parts)


def _take(buf: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(buf):
        raise FormatError(
            f"truncated {what}: need {size} bytes, {len(buf) - offset} available", offset
        )
    return buf[offset : offset + size]


def decode_descriptor_set(buf: bytes, offset: int = 0) -> tuple[DescriptorSet, int]:
    """Parse one DSC1 record starting at ``offset``; returns (set, end offset)."""
    magic = _take(buf, offset, 4, "magic")
    if magic != DSC_MAGIC:
        raise FormatError("bad magic", offset)
    pos = offset + 4
    code, dim, count = struct.unpack("<BHI", _take(buf, pos, 7, "header"))
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}", pos)
    pos += 7
    kind = _CODE_DTYPES[code]
    row = dim if kind == BINARY else 4 * dim
    raw = _take(buf, pos, row * count, "payload")
    if kind == BINARY:
        desc = np.frombuffer(raw, dtype=np.uint8).reshape(count, dim).copy()
    else:
        desc = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float32)
    pos += row * count
    (flags,) = struct.unpack("<B", _take(buf, pos, 1, "flags"))
    if flags & ~(_FLAG_KEYPOINTS | _FLAG_LANDMARKS):
        raise FormatError(f"unknown flag bits {flags:#04x}", pos)
    pos += 1
    kps = ids = None
    if flags & _FLAG_KEYPOINTS:
        raw = _take(buf, pos, 8 * count, "keypoints")
        kps = np.frombuffer(raw, dtype="<f4").reshape(count, 2).astype(np.float32)
        pos += 8 * count
    if flags & _FLAG_LANDMARKS:
        raw = _take(buf, pos, 4 * count, "landmark ids")
        ids = np.frombuffer(raw, dtype="<u4").astype(np.uint32)
        pos += 4 * count
    return DescriptorSet(desc, kps, ids), pos


def write_descriptor_set(s: DescriptorSet, path) -> None:
    Path(path).write_bytes(encode_descriptor_set(s))


def read_descriptor_set(path) -> DescriptorSet:
    buf = Path(path).read_bytes()
    s, end = decode_descriptor_set(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes", end)
    return s


# ---------------------------------------------------------------- MCH1


def encode_matches(pairs) -> bytes:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise FormatError("match index out of u32 range")
    return MCH_MAGIC + struct.pack("<I", len(arr)) + arr.astype("<u4").tobytes()


def decode_matches(buf: bytes) -> np.ndarray:
    if _take(buf, 0, 4, "magic") != MCH_MAGIC:
        raise FormatError("bad magic", 0)
    (count,) = struct.unpack("<I", _take(buf, 4, 4, "count"))
    raw = _take(buf, 8, 8 * count, "match pairs")
    if len(buf) != 8 + 8 * count:
        raise FormatError(f"{len(buf) - 8 - 8 * count} trailing bytes", 8 + 8 * count)
    return np.frombuffer(raw, dtype="<u4").reshape(count, 2).astype(np.int64)


def write_matches(pairs, path) -> None:
    Path(path).write_bytes(encode_matches(pairs))


def read_matches(path) -> np.ndarray:
    return decode_matches(Path(path).read_bytes())
