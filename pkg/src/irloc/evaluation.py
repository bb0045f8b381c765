"""Evaluation protocols: recall at full precision, relocalization, timelapse counts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from irloc.core import DescriptorSet
from irloc.errors import DegenerateError, EmptyInputError, FingerprintMismatchError, IrlocError
from irloc.geom import Intrinsics, Pose, local_alignment_error, ransac_pnp
from irloc.index import ImageDatabase, transform
from irloc.loopdet import LoopDetector, LoopParams, Mode, match_descriptors, verify_matches
from irloc.mapfile import NO_LANDMARK, MapFile
from irloc.vocab import Vocabulary

# ---------------------------------------------------------------- place recognition


@dataclass(frozen=True)
class EvalRecord:
    query_id: int
    candidate_id: int
    bow_score: float
    inlier_count: int
    is_true_positive: bool


def recall_at_full_precision(records: Sequence[EvalRecord]) -> tuple[int, float]:
    """Smallest inlier threshold that admits no false positive, and the recall there.

    Recall counts distinct queries with a surviving true-positive record.
    """
    if not records:
        raise EmptyInputError("no evaluation records")
    fp = [r.inlier_count for r in records if not r.is_true_positive]
    if fp:
        T = max(fp) + 1
    else:
        T = min(r.inlier_count for r in records)
    queries = {r.query_id for r in records}
    hits = {r.query_id for r in records if r.is_true_positive and r.inlier_count >= T}
    return T, len(hits) / len(queries)


def uniform_query_ids(n_frames: int, n_queries: int = 100) -> np.ndarray:
    if n_frames <= 0:
        return np.zeros(0, np.int64)
    if n_queries >= n_frames:
        return np.arange(n_frames)
    return np.unique(np.linspace(0, n_frames - 1, n_queries).round().astype(np.int64))


def place_recognition_records(
    vocab: Vocabulary,
    db_frames: Sequence[DescriptorSet],
    db_positions: np.ndarray,
    query_frames: Sequence[DescriptorSet],
    query_positions: np.ndarray,
    query_ids: Sequence[int],
    radius_m: float = 10.0,
    params: LoopParams = LoopParams(),
) -> list[EvalRecord]:
    """Best-candidate protocol: one record per query, inliers of F-matrix RANSAC.

    ``min_inliers`` is ignored here; the threshold is chosen afterwards.
    """
    db = ImageDatabase(vocab)
    for f in db_frames:
        db.add_image(f)
    db_positions = np.asarray(db_positions, dtype=np.float64)
    out = []
    for q in query_ids:
        frame = query_frames[q]
        bow, fv = transform(vocab, frame, db.di_levels)
        res = db.query(bow, 1)
        if not res:
            continue
        eid, score = res[0]
        ref = db.descriptors(eid)
        m = match_descriptors(frame, ref, fv, db.entries[eid].fv, params)
        inl = verify_matches(frame, ref, m, params)
        tp = bool(np.linalg.norm(db_positions[eid] - np.asarray(query_positions[q])) <= radius_m)
        out.append(EvalRecord(int(q), eid, score, inl, tp))
    return out


# ---------------------------------------------------------------- relocalization


@dataclass(frozen=True)
class RelocParams:
    loop: LoopParams = LoopParams(min_inliers=0)
    min_inliers: int = 15
    pnp_threshold_px: float = 4.0
    pnp_max_iters: int = 500
    gate_m: float = 10.0
    window: int = 10


@dataclass(frozen=True)
class RelocRecord:
    query_id: int
    matched_keyframe: int | None
    inliers: int
    position: np.ndarray | None  # estimated camera centre, map frame
    error_m: float | None
    status: str = "accepted"

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"


def relocalize_frame(
    detector: LoopDetector,
    mp: MapFile,
    frame: DescriptorSet,
    K: Intrinsics,
    params: RelocParams,
) -> tuple[str, int | None, int, Pose | None]:
    status, cand = detector.propose(frame)
    if cand is None:
        return status.value, None, 0, None
    kf = mp.keyframes[cand.entry_id]
    m = cand.matches
    if len(m):
        lm = kf.landmark_idx[m[:, 1]]
        m = m[lm != NO_LANDMARK]
    if len(m) < max(6, params.min_inliers):
        return "too_few_matches", cand.entry_id, 0, None
    X = mp.landmarks[kf.landmark_idx[m[:, 1]]].astype(np.float64)
    uv = frame.keypoints[m[:, 0]].astype(np.float64)
    try:
        pose, mask = ransac_pnp(X, uv, K, params.pnp_threshold_px, params.pnp_max_iters, params.loop.seed)
    except DegenerateError:
        return "pnp_failed", cand.entry_id, 0, None
    inl = int(mask.sum())
    if inl < params.min_inliers:
        return "verification_failed", cand.entry_id, inl, pose
    if np.linalg.norm(pose.center - kf.pose.center) > params.gate_m:
        return "distance_gate", cand.entry_id, inl, pose
    return "accepted", cand.entry_id, inl, pose


def relocalize_sequence(
    mp: MapFile,
    vocab: Vocabulary,
    queries: Sequence[DescriptorSet],
    K: Intrinsics,
    keyframe_gt: dict[int, np.ndarray] | None = None,
    query_gt: Sequence[np.ndarray] | None = None,
    params: RelocParams = RelocParams(),
) -> list[RelocRecord]:
    """Relocalize every query frame in order against the map.

    Errors use a rigid local alignment of the map keyframes around the matched
    keyframe to their ground truth; without ground truth the error is NaN for
    accepted frames.
    """
    if vocab.fingerprint != mp.db.fingerprint:
        raise FingerprintMismatchError("map database was built with a different vocabulary")
    mp.db.vocab = vocab
    det = LoopDetector(vocab, mp.db, params.loop, Mode.ISLANDS)
    map_pos = mp.keyframe_centers()
    out = []
    for qi, frame in enumerate(queries):
        status, kf, inl, pose = relocalize_frame(det, mp, frame, K, params)
        if status != "accepted":
            out.append(RelocRecord(qi, kf, inl, None, None, status))
            continue
        err = float("nan")
        if keyframe_gt is not None and query_gt is not None:
            try:
                err = local_alignment_error(map_pos, keyframe_gt, kf, params.window, pose, query_gt[qi])
            except DegenerateError:
                pass
        out.append(RelocRecord(qi, kf, inl, pose.center, err, status))
    return out


# ---------------------------------------------------------------- timelapse


def correct_match_count(
    matches: np.ndarray,
    kp_a: np.ndarray,
    kp_b: np.ndarray,
    truth_a,
    truth_b,
    px_tol: float = 3.0,
) -> int:
    """Matches whose two endpoints both lie within ``px_tol`` of the true
    projection of one landmark visible in both frames."""
    if len(matches) == 0:
        return 0
    shared, ia, ib = np.intersect1d(truth_a.landmark_ids, truth_b.landmark_ids, return_indices=True)
    if len(shared) == 0:
        return 0
    pa = truth_a.projections[ia]
    pb = truth_b.projections[ib]
    ka = kp_a[matches[:, 0]].astype(np.float64)
    kb = kp_b[matches[:, 1]].astype(np.float64)
    da = np.linalg.norm(ka[:, None, :] - pa[None], axis=2) <= px_tol
    db = np.linalg.norm(kb[:, None, :] - pb[None], axis=2) <= px_tol
    return int((da & db).any(axis=1).sum())


def timelapse_eval(
    frames: Sequence[DescriptorSet],
    truths: Sequence,
    ref_index: int = 0,
    px_tol: float = 3.0,
    params: LoopParams = LoopParams(),
) -> np.ndarray:
    """Correct-match count of every frame against ``frames[ref_index]``."""
    if not frames:
        raise EmptyInputError("no timelapse frames")
    if not 0 <= ref_index < len(frames):
        raise IrlocError("reference index out of range")
    ref = frames[ref_index]
    counts = []
    for f, t in zip(frames, truths, strict=True):
        m = match_descriptors(f, ref, params=params)
        counts.append(correct_match_count(m, f.keypoints, ref.keypoints, t, truths[ref_index], px_tol))
    return np.array(counts, dtype=np.int64)
