"""Loop-closure candidate pipeline on top of the image database.

Two protocols are supported. ``best`` ranks by raw BoW score, takes the top
entry and verifies it with fundamental-matrix RANSAC. ``islands`` follows the
DLoopDetector recipe: normalise scores by the score against the previous
frame, group surviving entries into islands of adjacent ids, require temporal
consistency with the previous queries, then verify the best member of the
best island.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from irloc.core import BINARY, FLOAT, DescriptorSet, distance_matrix, read_matches
from irloc.errors import DegenerateError, FingerprintMismatchError, IrlocError
from irloc.geom import ransac_fundamental
from irloc.index import BowVector, FeatureVector, ImageDatabase, l1_score, transform
from irloc.vocab import Vocabulary

MIN_REFERENCE_SCORE = 0.01


class Mode(str, enum.Enum):
    BEST = "best"
    ISLANDS = "islands"


class Status(str, enum.Enum):
    ACCEPTED = "accepted"
    NO_CANDIDATES = "no_candidates"
    LOW_NORMALIZED_SCORE = "low_normalized_score"
    TEMPORALLY_INCONSISTENT = "temporally_inconsistent"
    VERIFICATION_FAILED = "verification_failed"


@dataclass(frozen=True)
class LoopParams:
    alpha: float = 0.3
    max_island_gap: int = 3
    temporal_k: int = 3
    dislocal: int = 20
    min_inliers: int = 12
    ratio: float = 0.8
    binary_threshold: int = 64
    ransac_threshold_px: float = 2.0
    ransac_max_iters: int = 2000
    max_results: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise IrlocError("alpha must lie in (0, 1]")
        for name in ("max_island_gap", "temporal_k", "dislocal", "min_inliers", "binary_threshold"):
            if getattr(self, name) < 0:
                raise IrlocError(f"{name} must be non-negative")
        if not 0 < self.ratio <= 1:
            raise IrlocError("ratio must lie in (0, 1]")
        if self.ransac_threshold_px <= 0:
            raise IrlocError("ransac_threshold_px must be positive")


@dataclass(frozen=True)
class Island:
    first_id: int
    last_id: int
    score: float
    best_entry: int
    best_score: float = 0.0

    def overlaps(self, other: "Island", gap: int) -> bool:
        return other.first_id <= self.last_id + gap and other.last_id >= self.first_id - gap


@dataclass(frozen=True)
class Candidate:
    entry_id: int
    score: float
    inlier_count: int
    matches: np.ndarray


@dataclass(frozen=True)
class LoopResult:
    status: Status
    candidate: Candidate | None = None

    @property
    def accepted(self) -> bool:
        return self.status is Status.ACCEPTED


# ---------------------------------------------------------------- scoring


def normalize_scores(results: Sequence[tuple[int, float]], s_norm: float, alpha: float) -> list[tuple[int, float]]:
    """Divide by the reference score and drop entries below ``alpha``.

    A reference below ``MIN_REFERENCE_SCORE`` makes every ratio meaningless,
    so nothing survives.
    """
    if s_norm < MIN_REFERENCE_SCORE:
        return []
    out = []
    for eid, s in results:
        eta = s / s_norm
        if eta >= alpha:
            out.append((eid, eta))
    return out


def build_islands(candidates: Sequence[tuple[int, float]], max_gap: int) -> list[Island]:
    if not candidates:
        return []
    cands = sorted(candidates)
    groups: list[list[tuple[int, float]]] = [[cands[0]]]
    for c in cands[1:]:
        if c[0] - groups[-1][-1][0] > max_gap:
            groups.append([c])
        else:
            groups[-1].append(c)
    islands = []
    for g in groups:
        # max by score, ties to the lower id (g is id-sorted, max keeps the first)
        best = max(g, key=lambda c: c[1])
        islands.append(Island(g[0][0], g[-1][0], float(sum(c[1] for c in g)), best[0], float(best[1])))
    islands.sort(key=lambda i: (-i.score, i.first_id))
    return islands


def temporal_check(history: Sequence[Island | None], current: Island, k: int, gap: int = 3) -> bool:
    """True iff each of the last ``k`` best islands overlaps ``current`` widened by ``gap``."""
    if k == 0:
        return True
    recent = list(history)[-k:]
    if len(recent) < k:
        return False
    return all(h is not None and current.overlaps(h, gap) for h in recent)


# ---------------------------------------------------------------- matching


def _mutual_nn(D: np.ndarray, kind: str, ratio: float, threshold: int) -> list[tuple[int, int]]:
    if D.size == 0:
        return []
    nn_ab = D.argmin(axis=1)
    nn_ba = D.argmin(axis=0)
    pairs = []
    for i, j in enumerate(nn_ab.tolist()):
        if nn_ba[j] != i:
            continue
        d = D[i, j]
        if kind == BINARY:
            if d > threshold:
                continue
        elif D.shape[1] > 1:
            row = D[i]
            second = np.partition(row, 1)[1]
            if not d < ratio * second:
                continue
        pairs.append((i, j))
    return pairs


def match_descriptors(
    a: DescriptorSet,
    b: DescriptorSet,
    fv_a: FeatureVector | None = None,
    fv_b: FeatureVector | None = None,
    params: LoopParams = LoopParams(),
) -> np.ndarray:
    """Mutual nearest neighbours, searched per shared direct-index node.

    Without feature vectors the whole sets form a single bucket. Float matches
    also pass a ratio test against the second-best neighbour in the bucket;
    binary matches pass an absolute Hamming threshold.
    """
    if a.kind != b.kind or a.dim != b.dim:
        raise IrlocError("descriptor sets differ in kind or dimension")
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), np.int64)
    if fv_a is None or fv_b is None:
        buckets = [(np.arange(len(a)), np.arange(len(b)))]
    else:
        buckets = [(fv_a.buckets[n], fv_b.buckets[n]) for n in fv_a.nodes() if n in fv_b.buckets]
    out = []
    for ia, ib in buckets:
        D = distance_matrix(a.descriptors[ia], b.descriptors[ib], a.kind)
        if a.kind == FLOAT:
            D = np.sqrt(D)
        for i, j in _mutual_nn(D, a.kind, params.ratio, params.binary_threshold):
            out.append((int(ia[i]), int(ib[j])))
    if not out:
        return np.zeros((0, 2), np.int64)
    res = np.array(sorted(out), dtype=np.int64)
    return res


def verify_matches(a: DescriptorSet, b: DescriptorSet, matches: np.ndarray, params: LoopParams) -> int:
    """Fundamental-matrix RANSAC inlier count (0 when too few matches).

    A camera that has not moved leaves F undefined, so matches whose
    keypoints coincide within the threshold are counted as well and the
    larger of the two counts wins.
    """
    if a.keypoints is None or b.keypoints is None:
        raise IrlocError("geometric verification needs keypoints")
    if len(matches) < 8:
        return 0
    x1 = a.keypoints[matches[:, 0]].astype(np.float64)
    x2 = b.keypoints[matches[:, 1]].astype(np.float64)
    static = int((np.linalg.norm(x1 - x2, axis=1) <= params.ransac_threshold_px).sum())
    try:
        _, mask = ransac_fundamental(x1, x2, params.ransac_threshold_px, params.ransac_max_iters, params.seed)
    except DegenerateError:
        return static if static >= 8 else 0
    return max(int(mask.sum()), static if static >= 8 else 0)


# ---------------------------------------------------------------- detector

Matcher = Callable[[DescriptorSet, int], np.ndarray | None]


def matches_dir_matcher(directory, query_stem: str) -> Matcher:
    """Matcher reading ``<query_stem>__<entry_id>.mch`` files; missing file means no override."""
    root = Path(directory)

    def lookup(_frame: DescriptorSet, entry_id: int):
        p = root / f"{query_stem}__{entry_id}.mch"
        return read_matches(p) if p.exists() else None

    return lookup


class LoopDetector:
    """Stateful detector. Each ``process`` call queries, then (optionally)
    appends the frame to the database, mirroring an online SLAM front end.
    The temporal history is per-instance; callers sharing one detector across
    threads must serialise ``process``."""

    def __init__(
        self,
        vocab: Vocabulary,
        db: ImageDatabase,
        params: LoopParams = LoopParams(),
        mode: Mode | str = Mode.ISLANDS,
    ):
        if vocab.fingerprint != db.fingerprint:
            raise FingerprintMismatchError("vocabulary fingerprint does not match database")
        self.vocab = vocab
        self.db = db
        self.params = params
        self.mode = Mode(mode)
        self.history: list[Island | None] = []
        self._prev_bow: BowVector | None = None

    def reset(self) -> None:
        self.history.clear()
        self._prev_bow = None

    def propose(
        self,
        frame: DescriptorSet,
        *,
        add: bool = False,
        exclude_recent: bool | None = None,
        matcher: Matcher | None = None,
    ) -> tuple[Status | None, Candidate | None]:
        """Select a candidate and match against it, skipping geometric verification.

        Returns ``(rejection status, None)`` or ``(None, candidate)``; the
        candidate's ``inlier_count`` is -1 until some verifier fills it.
        """
        bow, fv = transform(self.vocab, frame, self.db.di_levels)
        n = len(self.db)
        if exclude_recent is None:
            exclude_recent = add
        exclude = (max(0, n - self.params.dislocal), n) if exclude_recent else None
        try:
            if self.mode is Mode.BEST:
                status, eid, score = self._select_best(bow, exclude)
            else:
                status, eid, score = self._select_island(bow, exclude)
            if status is not None:
                return status, None
            return None, Candidate(eid, score, -1, self._match(frame, fv, eid, matcher))
        finally:
            self._prev_bow = bow
            if add:
                self.db.add(bow, fv, frame)

    def process(
        self,
        frame: DescriptorSet,
        *,
        add: bool = False,
        exclude_recent: bool | None = None,
        matcher: Matcher | None = None,
    ) -> LoopResult:
        status, c = self.propose(frame, add=add, exclude_recent=exclude_recent, matcher=matcher)
        if c is None:
            return LoopResult(status)
        ref = self.db.descriptors(c.entry_id)
        cand = Candidate(c.entry_id, c.score, verify_matches(frame, ref, c.matches, self.params), c.matches)
        if cand.inlier_count >= self.params.min_inliers:
            return LoopResult(Status.ACCEPTED, cand)
        return LoopResult(Status.VERIFICATION_FAILED, cand)

    def _match(self, frame, fv, entry_id, matcher) -> np.ndarray:
        ref = self.db.descriptors(entry_id)
        if ref is None:
            raise IrlocError(f"database entry {entry_id} has no stored descriptors")
        matches = matcher(frame, entry_id) if matcher is not None else None
        if matches is None:
            matches = match_descriptors(frame, ref, fv, self.db.entries[entry_id].fv, self.params)
        return np.asarray(matches, dtype=np.int64).reshape(-1, 2)

    def _select_best(self, bow, exclude):
        results = self.db.query(bow, 1, exclude)
        if not results:
            return Status.NO_CANDIDATES, -1, 0.0
        eid, score = results[0]
        return None, eid, score

    def _select_island(self, bow, exclude):
        p = self.params
        results = self.db.query(bow, p.max_results, exclude)
        if not results:
            self.history.append(None)
            return Status.NO_CANDIDATES, -1, 0.0
        # without a previous frame there is no reference score at all
        s_norm = l1_score(bow, self._prev_bow) if self._prev_bow is not None else 0.0
        kept = normalize_scores(results, s_norm, p.alpha)
        if not kept:
            self.history.append(None)
            return Status.LOW_NORMALIZED_SCORE, -1, 0.0
        best = build_islands(kept, p.max_island_gap)[0]
        consistent = temporal_check(self.history, best, p.temporal_k, p.max_island_gap)
        self.history.append(best)
        if not consistent:
            return Status.TEMPORALLY_INCONSISTENT, -1, 0.0
        return None, best.best_entry, dict(results)[best.best_entry]


def detect_loop(
    db: ImageDatabase,
    frame: DescriptorSet,
    params: LoopParams = LoopParams(),
    mode: Mode | str = Mode.BEST,
    vocab: Vocabulary | None = None,
) -> LoopResult:
    """One-shot detection without temporal history (islands mode then needs
    ``temporal_k == 0``)."""
    vocab = vocab or db.vocab
    if vocab is None:
        raise IrlocError("no vocabulary available for the query")
    return LoopDetector(vocab, db, params, mode).process(frame)
