import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from irloc.core import DescriptorSet
from irloc.errors import EmptyInputError, FingerprintMismatchError, IrlocError
from irloc.evaluation import (
    EvalRecord,
    RelocParams,
    correct_match_count,
    recall_at_full_precision,
    relocalize_sequence,
    timelapse_eval,
    uniform_query_ids,
)
from irloc.experiments import DEFAULT_RELOC, build_day_map
from irloc.loopdet import LoopParams
from irloc.simgen import DriftModel, MapDrift, default_intrinsics, generate_pass, static_timelapse
from irloc.vocab import build_vocabulary


def rec(q, inl, tp):
    return EvalRecord(q, 0, 0.5, inl, tp)


def test_recall_all_true():
    T, r = recall_at_full_precision([rec(0, 30, True), rec(1, 12, True), rec(2, 50, True)])
    assert (T, r) == (12, 1.0)


def test_recall_top_false_positive():
    T, r = recall_at_full_precision([rec(0, 30, True), rec(1, 80, False), rec(2, 50, True)])
    assert (T, r) == (81, 0.0)


def test_recall_mixed():
    recs = [rec(0, 30, True), rec(1, 20, False), rec(2, 50, True), rec(3, 10, True)]
    assert recall_at_full_precision(recs) == (21, 0.5)


def test_recall_empty():
    with pytest.raises(EmptyInputError):
        recall_at_full_precision([])


@given(st.lists(st.tuples(st.integers(0, 100), st.booleans()), min_size=1, max_size=50))
def test_recall_threshold_removes_every_false_positive(items):
    recs = [rec(i, inl, tp) for i, (inl, tp) in enumerate(items)]
    T, r = recall_at_full_precision(recs)
    assert all(x.is_true_positive for x in recs if x.inlier_count >= T)
    assert 0.0 <= r <= 1.0
    # no smaller threshold is also clean
    assert any(not x.is_true_positive for x in recs if x.inlier_count >= T - 1) or T == min(x.inlier_count for x in recs)


def test_uniform_query_ids():
    ids = uniform_query_ids(157, 100)
    assert len(ids) == 100 and ids[0] == 0 and ids[-1] == 156
    assert list(uniform_query_ids(5, 100)) == [0, 1, 2, 3, 4]


# ---------------------------------------------------------------- relocalization


@pytest.fixture(scope="module")
def clean_map(small_scenario, small_vocab):
    import dataclasses

    sc = dataclasses.replace(small_scenario, map_drift=MapDrift(0.0, 0.0))
    return build_day_map(sc, small_vocab)


def test_reloc_own_keyframes(clean_map, small_vocab):
    mp, dm, day = clean_map
    kf_gt = dict(enumerate(dm.gt_positions))
    recs = relocalize_sequence(mp, small_vocab, day.frames, default_intrinsics(), kf_gt, day.positions(), DEFAULT_RELOC)
    acc = [r for r in recs if r.accepted]
    assert len(acc) >= 0.9 * len(recs)
    assert max(r.error_m for r in acc) < 0.05
    assert sum(r.matched_keyframe == r.query_id for r in acc) >= 0.9 * len(acc)


def test_reloc_empty_frame_has_no_candidates(clean_map, small_vocab):
    mp, _, _ = clean_map
    recs = relocalize_sequence(mp, small_vocab, [DescriptorSet.empty("float", 256)], default_intrinsics())
    assert recs[0].status == "no_candidates" and recs[0].error_m is None


def test_reloc_unmapped_section_rejected(small_scenario, small_vocab, clean_map, small_world):
    mp, dm, _ = clean_map
    spec = small_scenario.pass_spec(0.5, 7, sweep=2 * math.pi)
    night = generate_pass(small_world, spec)
    far = [i for i, p in enumerate(night.positions()) if np.min(np.linalg.norm(dm.gt_positions - p, axis=1)) > 10]
    assert len(far) >= 5
    recs = relocalize_sequence(mp, small_vocab, night.frames, default_intrinsics(), params=DEFAULT_RELOC)
    assert not any(recs[i].accepted for i in far)


def test_reloc_fingerprint_mismatch(clean_map, rng):
    mp, _, day = clean_map
    other = build_vocabulary(rng.standard_normal((50, 256)).astype(np.float32), 3, 2)
    with pytest.raises(FingerprintMismatchError):
        relocalize_sequence(mp, other, day.frames[:1], default_intrinsics())


def test_reloc_records_error_iff_accepted(clean_map, small_vocab):
    mp, dm, day = clean_map
    recs = relocalize_sequence(
        mp, small_vocab, day.frames[:15], default_intrinsics(), dict(enumerate(dm.gt_positions)), day.positions()
    )
    for r in recs:
        assert (r.error_m is not None) == r.accepted
        assert (r.position is not None) == r.accepted


def test_reloc_gate(clean_map, small_vocab):
    mp, dm, day = clean_map
    p = RelocParams(loop=LoopParams(alpha=0.2, min_inliers=0), gate_m=1e-6)
    recs = relocalize_sequence(mp, small_vocab, day.frames[:15], default_intrinsics(), params=p)
    assert not any(r.accepted for r in recs)
    assert any(r.status == "distance_gate" for r in recs)


# ---------------------------------------------------------------- timelapse


def test_correct_match_count_examples():
    from irloc.geom import Pose
    from irloc.simgen import FrameTruth

    ta = FrameTruth(Pose.identity(), 0.0, np.array([1, 2, 3]), np.array([[10.0, 10], [50, 50], [90, 90]]))
    tb = FrameTruth(Pose.identity(), 0.0, np.array([3, 2, 9]), np.array([[91.0, 90], [52, 50], [0, 0]]))
    kpa = ta.projections.copy()
    kpb = tb.projections.copy()
    kpb[1] = [54.0, 50.0]  # 2 px from its landmark's projection
    m = np.array([[1, 1], [2, 0], [0, 2]])
    assert correct_match_count(m, kpa, kpb, ta, tb, 3.0) == 2
    assert correct_match_count(m, kpa, kpb, ta, tb, 1.5) == 1
    assert correct_match_count(np.zeros((0, 2), int), kpa, kpb, ta, tb) == 0


def test_timelapse_reference_frame_counts_everything(small_world):
    quiet = DriftModel(sigma_obs=0.0, pixel_noise=0.0)
    seq = static_timelapse(small_world, [0.0, 0.2], drift=quiet, seed=1)
    counts = timelapse_eval(seq.frames, seq.truths, 0, 3.0)
    assert counts[0] == len(seq.frames[0]) > 20


def test_timelapse_zero_tolerance_with_noise(small_world):
    seq = static_timelapse(small_world, [0.0, 0.1, 0.2], seed=1)
    counts = timelapse_eval(seq.frames, seq.truths, 0, 0.0)
    assert counts[1:].max() <= 1


def test_timelapse_errors(small_world):
    with pytest.raises(EmptyInputError):
        timelapse_eval([], [])
    seq = static_timelapse(small_world, [0.0], seed=1)
    with pytest.raises(IrlocError):
        timelapse_eval(seq.frames, seq.truths, 3)


def test_timelapse_symmetric_over_seeds(small_world):
    taus = np.linspace(0, 1, 13)
    total = np.zeros(len(taus))
    for seed in range(20):
        seq = static_timelapse(small_world, taus, seed=seed)
        total += timelapse_eval(seq.frames, seq.truths, 0, 3.0)
    mean = total / 20
    for i in range(1, 6):
        a, b = mean[i], mean[12 - i]
        assert abs(a - b) <= 0.10 * max(a, b)
