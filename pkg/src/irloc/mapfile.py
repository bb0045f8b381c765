"""Saved SLAM map: keyframes with features tied to 3D landmarks plus a BoW database.

Layout (little-endian)::

    "MAP1" | keyframe count u32
    per keyframe: pose 12 x f32 (R row-major, then t; world-to-camera)
                  DSC1 record (descriptors only)
                  keypoints n x (f32 u, f32 v)
                  landmark index n x u32 (0xFFFFFFFF = none)
    landmark count u32 | count x (f32 x, f32 y, f32 z)
    embedded IDB1 database without descriptor blobs
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from irloc.core import DescriptorSet, decode_descriptor_set, encode_descriptor_set
from irloc.errors import FormatError, IrlocError
from irloc.geom import Pose
from irloc.index import DEFAULT_DI_LEVELS, ImageDatabase, transform
from irloc.vocab import Vocabulary

MAP_MAGIC = b"MAP1"
NO_LANDMARK = 0xFFFFFFFF


@dataclass(eq=False)
class KeyFrame:
    pose: Pose
    features: DescriptorSet  # keypoints required
    landmark_idx: np.ndarray  # uint32 into MapFile.landmarks, NO_LANDMARK if untracked
    stored_pose: np.ndarray | None = None  # f32 record as read from disk, rewritten verbatim

    def __post_init__(self):
        if self.features.keypoints is None:
            raise IrlocError("keyframe features need keypoints")
        self.landmark_idx = np.ascontiguousarray(self.landmark_idx, dtype=np.uint32).reshape(-1)
        if len(self.landmark_idx) != len(self.features):
            raise IrlocError("landmark index count differs from feature count")


@dataclass(eq=False)
class MapFile:
    keyframes: list[KeyFrame]
    landmarks: np.ndarray  # (M, 3) float32, map frame
    db: ImageDatabase

    def __post_init__(self):
        self.landmarks = np.ascontiguousarray(self.landmarks, dtype=np.float32).reshape(-1, 3)
        if len(self.db) != len(self.keyframes):
            raise IrlocError("database entries and keyframes disagree in number")
        for kf in self.keyframes:
            bad = (kf.landmark_idx != NO_LANDMARK) & (kf.landmark_idx >= len(self.landmarks))
            if bad.any():
                raise IrlocError("landmark index out of range")

    def keyframe_centers(self) -> dict[int, np.ndarray]:
        return {i: kf.pose.center for i, kf in enumerate(self.keyframes)}

    def to_bytes(self) -> bytes:
        parts = [MAP_MAGIC, struct.pack("<I", len(self.keyframes))]
        for kf in self.keyframes:
            if kf.stored_pose is not None:
                pose = kf.stored_pose.astype("<f4")
            else:
                pose = np.concatenate([kf.pose.R.ravel(), kf.pose.t]).astype("<f4")
            parts.append(pose.tobytes())
            parts.append(encode_descriptor_set(DescriptorSet(kf.features.descriptors)))
            parts.append(kf.features.keypoints.astype("<f4").tobytes())
            parts.append(kf.landmark_idx.astype("<u4").tobytes())
        parts.append(struct.pack("<I", len(self.landmarks)))
        parts.append(self.landmarks.astype("<f4").tobytes())
        stripped = ImageDatabase(self.db.fingerprint, self.db.di_levels)
        for e in self.db.entries:
            stripped.add(e.bow, e.fv)
        parts.append(stripped.to_bytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, vocab: Vocabulary | None = None, di_levels: int = DEFAULT_DI_LEVELS) -> "MapFile":
        if buf[:4] != MAP_MAGIC:
            raise FormatError("bad magic", 0)
        pos = 4
        count = _unpack(buf, pos, "<I", "keyframe count")[0]
        pos += 4
        kfs = []
        for _ in range(count):
            raw = _unpack(buf, pos, "<12f", "keyframe pose")
            pos += 48
            R = np.array(raw[:9], dtype=np.float64).reshape(3, 3)
            U, _, Vt = np.linalg.svd(R)  # f32 storage loses orthonormality slightly
            pose = Pose(U @ Vt, np.array(raw[9:], dtype=np.float64))
            s, pos = decode_descriptor_set(buf, pos)
            n = len(s)
            kp = np.frombuffer(_take(buf, pos, 8 * n, "keypoints"), dtype="<f4").reshape(n, 2)
            pos += 8 * n
            lm = np.frombuffer(_take(buf, pos, 4 * n, "landmark indices"), dtype="<u4")
            pos += 4 * n
            kfs.append(KeyFrame(pose, DescriptorSet(s.descriptors, kp), lm.astype(np.uint32), np.array(raw, "<f4")))
        m = _unpack(buf, pos, "<I", "landmark count")[0]
        pos += 4
        lms = np.frombuffer(_take(buf, pos, 12 * m, "landmark table"), dtype="<f4").reshape(m, 3)
        pos += 12 * m
        stored = ImageDatabase.from_bytes(buf[pos:], vocab, di_levels)
        db = ImageDatabase(stored.fingerprint, di_levels)
        db.vocab = stored.vocab
        if len(stored) != count:
            raise FormatError(f"database holds {len(stored)} entries for {count} keyframes", pos)
        for e, kf in zip(stored.entries, kfs):
            db.add(e.bow, e.fv, kf.features)
        return cls(kfs, lms.astype(np.float32), db)

    @classmethod
    def load(cls, path, vocab: Vocabulary | None = None, di_levels: int = DEFAULT_DI_LEVELS) -> "MapFile":
        return cls.from_bytes(Path(path).read_bytes(), vocab, di_levels)


def _take(buf: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(buf):
        raise FormatError(f"truncated {what}: need {n} bytes, {len(buf) - pos} available", pos)
    return buf[pos : pos + n]


def _unpack(buf: bytes, pos: int, fmt: str, what: str) -> tuple:
    return struct.unpack_from(fmt, _take(buf, pos, struct.calcsize(fmt), what))


def build_map(
    vocab: Vocabulary,
    poses: list[Pose],
    frames: list[DescriptorSet],
    landmark_ids: np.ndarray,
    landmark_positions: np.ndarray,
    di_levels: int = DEFAULT_DI_LEVELS,
) -> MapFile:
    """Assemble a map from keyframes whose features carry landmark ids.

    ``landmark_ids`` (ascending) names the rows of ``landmark_positions``;
    features observing a landmark outside that table are left untracked.
    """
    landmark_ids = np.asarray(landmark_ids, dtype=np.int64)
    if np.any(np.diff(landmark_ids) <= 0):
        raise IrlocError("landmark ids must be strictly ascending")
    db = ImageDatabase(vocab, di_levels)
    kfs = []
    for pose, f in zip(poses, frames, strict=True):
        if f.landmark_ids is None:
            raise IrlocError("map frames need landmark ids")
        ids = f.landmark_ids.astype(np.int64)
        pos = np.searchsorted(landmark_ids, ids)
        pos_c = np.minimum(pos, max(len(landmark_ids) - 1, 0))
        found = (len(landmark_ids) > 0) & (landmark_ids[pos_c] == ids) if len(landmark_ids) else np.zeros(len(ids), bool)
        idx = np.where(found, pos_c, NO_LANDMARK).astype(np.uint32)
        feats = DescriptorSet(f.descriptors, f.keypoints)
        kfs.append(KeyFrame(pose, feats, idx))
        bow, fv = transform(vocab, feats, di_levels)
        db.add(bow, fv, feats)
    return MapFile(kfs, landmark_positions, db)
