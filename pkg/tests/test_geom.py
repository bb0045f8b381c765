import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from irloc.errors import DegenerateError
from irloc.geom import (
    Pose,
    PnPTrace,
    epipolar_error,
    fundamental_8point,
    local_alignment_error,
    pnp_solve,
    ransac_fundamental,
    ransac_pnp,
    reprojection_errors,
    sampson_distances,
    umeyama,
)
from oracles import rigid_fit_by_quaternion, sampson_direct
from scenes import K, far_outliers, pnp_scene, rot, two_view


def _pose_close(a: Pose, b: Pose, tol: float) -> bool:
    return np.linalg.norm(a.R - b.R) < tol and np.linalg.norm(a.t - b.t) < tol


# ---------------------------------------------------------------- fundamental


def test_eight_point_noiseless_residual(rng):
    x1, x2, _ = two_view(rng, 50)
    F = fundamental_8point(x1[:8], x2[:8])
    assert max(sampson_direct(F, a, b) for a, b in zip(x1, x2)) < 1e-6


def test_eight_point_matches_true_f(rng):
    x1, x2, F_true = two_view(rng, 40)
    F = fundamental_8point(x1, x2)
    assert abs(abs(np.sum(F * F_true))) == pytest.approx(1.0, abs=1e-8)


def test_pure_x_translation():
    r = np.random.default_rng(0)
    X = np.c_[r.uniform(-1, 1, 20), r.uniform(-1, 1, 20), r.uniform(3, 6, 20)]
    x1 = X[:, :2] / X[:, 2:]
    X2 = X + [1.0, 0, 0]
    x2 = X2[:, :2] / X2[:, 2:]
    F = fundamental_8point(x1, x2)
    ref = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]]) / np.sqrt(2)
    assert abs(np.sum(F * ref)) == pytest.approx(1.0, abs=1e-9)
    assert F.flat[np.argmax(np.abs(F))] > 0


def test_rank_two_and_normalisation(rng):
    x1, x2, _ = two_view(rng, 30)
    x2 = x2 + rng.normal(0, 0.5, x2.shape)
    F = fundamental_8point(x1, x2)
    s = np.linalg.svd(F, compute_uv=False)
    assert s[2] < 1e-12
    assert np.linalg.norm(F) == pytest.approx(1.0)


def test_eight_point_errors(rng):
    x1, x2, _ = two_view(rng, 10)
    with pytest.raises(DegenerateError):
        fundamental_8point(x1[:7], x2[:7])
    with pytest.raises(DegenerateError):
        fundamental_8point(np.tile(x1[:1], (8, 1)), x2[:8])


def test_epipolar_error_examples(rng):
    x1, x2, F = two_view(rng, 20)
    assert epipolar_error(F, x1[0], x2[0]) < 1e-10
    p, q = x1[1] + [3.0, -2.0], x2[1] + [1.0, 4.0]
    assert epipolar_error(F, p, q) == pytest.approx(epipolar_error(F.T, q, p), rel=1e-12)
    assert epipolar_error(F, p, q) == pytest.approx(sampson_direct(F, p, q), rel=1e-10)


def test_ransac_all_inliers(rng):
    x1, x2, _ = two_view(rng, 100)
    _, mask = ransac_fundamental(x1, x2, 2.0, 2000, seed=1)
    assert mask.all()


def test_ransac_with_labelled_outliers(rng):
    x1, x2, F_true = two_view(rng, 70)
    x1 = x1 + rng.normal(0, 0.3, x1.shape)
    x2 = x2 + rng.normal(0, 0.3, x2.shape)
    o1, o2 = far_outliers(rng, F_true, 30, 8.0)
    a, b = np.r_[x1, o1], np.r_[x2, o2]
    F, mask = ransac_fundamental(a, b, 2.0, 2000, seed=3)
    assert mask[:70].mean() >= 0.95
    assert not mask[70:].any()
    assert np.all(sampson_distances(F, a[mask], b[mask]) <= 2.0)
    F2, mask2 = ransac_fundamental(a, b, 2.0, 2000, seed=3)
    assert np.array_equal(mask, mask2) and np.array_equal(F, F2)


# ---------------------------------------------------------------- PnP


def test_pnp_identity(rng):
    X, uv, _ = pnp_scene(rng, 30, Pose.identity())
    est = pnp_solve(X, uv, K)
    assert _pose_close(est, Pose.identity(), 1e-9)


def test_pnp_known_pose(rng):
    X, uv, gt = pnp_scene(rng, 30)
    est = pnp_solve(X, uv, K)
    assert _pose_close(est, gt, 1e-6)
    assert est.is_valid()


def test_pnp_noise_not_worse_than_truth(rng):
    X, uv, gt = pnp_scene(rng, 80)
    noisy = uv + rng.normal(0, 0.5, uv.shape)
    trace = PnPTrace([], 0)
    est = pnp_solve(X, noisy, K, trace=trace)
    assert reprojection_errors(est, X, noisy, K).mean() <= reprojection_errors(gt, X, noisy, K).mean() + 1e-9
    assert all(b <= a for a, b in zip(trace.costs, trace.costs[1:]))


def test_pnp_degenerate(rng):
    X, uv, _ = pnp_scene(rng, 5)
    with pytest.raises(DegenerateError):
        pnp_solve(X, uv, K)
    X, uv, _ = pnp_scene(rng, 10)
    X[:, 2] = 20.0  # all points on one plane
    with pytest.raises(DegenerateError):
        pnp_solve(X, uv, K)


def test_ransac_pnp_all_inliers_equals_solver(rng):
    X, uv, _ = pnp_scene(rng, 40)
    uv = uv + rng.normal(0, 0.3, uv.shape)
    direct = pnp_solve(X, uv, K)
    est, mask = ransac_pnp(X, uv, K, 4.0, 500, seed=0)
    assert mask.all()
    assert _pose_close(est, direct, 1e-9)


def test_ransac_pnp_outliers(rng):
    X, uv, gt = pnp_scene(rng, 100)
    bad = rng.choice(100, 30, replace=False)
    uv = uv.copy()
    uv[bad] += rng.uniform(30, 120, (30, 2)) * rng.choice([-1, 1], (30, 2))
    est, mask = ransac_pnp(X, uv, K, 4.0, 500, seed=2)
    assert _pose_close(est, gt, 1e-3)
    assert not mask[bad].any()
    counts = [int(ransac_pnp(X, uv, K, th, 500, seed=2)[1].sum()) for th in (8.0, 4.0, 1.0, 1e-7)]
    assert counts == sorted(counts, reverse=True)


# ---------------------------------------------------------------- alignment


def test_umeyama_identity(rng):
    X = rng.standard_normal((10, 3))
    T = umeyama(X, X)
    assert T.scale == pytest.approx(1.0) and np.allclose(T.R, np.eye(3)) and np.allclose(T.t, 0, atol=1e-12)


def test_umeyama_known_similarity(rng):
    X = rng.standard_normal((12, 3))
    Rz = rot("z", 90.0)
    Y = 2.0 * X @ Rz.T + [1, 2, 3]
    T = umeyama(X, Y, with_scale=True)
    assert abs(T.scale - 2.0) < 1e-9
    assert np.abs(T.R - Rz).max() < 1e-9
    assert np.abs(T.t - [1, 2, 3]).max() < 1e-9


def test_umeyama_noisy_rigid_vs_quaternion_oracle(rng):
    X = rng.standard_normal((30, 3)) * 5
    R = Rotation.random(random_state=7).as_matrix()
    t = rng.standard_normal(3)
    Y = X @ R.T + t + rng.normal(0, 1e-6, X.shape)
    T = umeyama(X, Y, with_scale=False)
    assert np.abs(T.R - R).max() < 1e-4 and np.abs(T.t - t).max() < 1e-4
    Ro, to = rigid_fit_by_quaternion(X, Y)
    res = ((T.apply(X) - Y) ** 2).sum()
    res_o = ((X @ Ro.T + to - Y) ** 2).sum()
    assert res == pytest.approx(res_o, rel=1e-6, abs=1e-18)


def test_umeyama_is_local_minimum(rng):
    X = rng.standard_normal((20, 3))
    Y = 1.3 * X @ rot("x", 30).T + 0.5 + rng.normal(0, 0.05, X.shape)
    T = umeyama(X, Y)
    base = ((T.apply(X) - Y) ** 2).sum()
    for _ in range(1000):
        dR = Rotation.from_rotvec(rng.normal(0, 1e-3, 3)).as_matrix()
        s = T.scale + rng.normal(0, 1e-3)
        t = T.t + rng.normal(0, 1e-3, 3)
        assert ((s * X @ (dR @ T.R).T + t - Y) ** 2).sum() >= base - 1e-12


def test_umeyama_degenerate():
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateError):
        umeyama(line, line)
    with pytest.raises(DegenerateError):
        umeyama(np.eye(3)[:2], np.eye(3)[:2])


def _track(n=25):
    s = np.linspace(0, 1, n)
    return np.c_[40 * np.cos(s), 40 * np.sin(s), 0.3 * s]


def test_local_alignment_exact():
    gt = _track()
    ids = {i: p for i, p in enumerate(gt)}
    pose = Pose.from_center(np.eye(3), gt[7])
    assert local_alignment_error(ids, ids, 7, 10, pose, gt[7]) == pytest.approx(0.0, abs=1e-12)


def test_local_alignment_removes_global_transform():
    gt = _track()
    R = rot("z", 40.0) @ rot("x", 3.0)
    mp = gt @ R.T + [5, -3, 1]
    pose = Pose.from_center(np.eye(3), mp[12])
    err = local_alignment_error(dict(enumerate(mp)), dict(enumerate(gt)), 12, 10, pose, gt[12])
    assert err < 1e-9


def test_local_alignment_linear_drift_vs_oracle():
    gt = _track(40)
    drift = np.outer(np.arange(40), [0.02, -0.01, 0.005])
    mp = gt + drift
    anchor, window = 20, 10
    q_map = mp[22] + [0.3, 0.1, 0.0]
    pose = Pose.from_center(np.eye(3), q_map)
    err = local_alignment_error(dict(enumerate(mp)), dict(enumerate(gt)), anchor, window, pose, gt[22])
    sel = list(range(anchor - window, anchor + window + 1))
    Ro, to = rigid_fit_by_quaternion(mp[sel], gt[sel])
    want = np.linalg.norm(Ro @ q_map + to - gt[22])
    assert err == pytest.approx(want, abs=1e-9)


def test_local_alignment_too_few():
    gt = _track(3)
    with pytest.raises(DegenerateError):
        local_alignment_error({0: gt[0], 1: gt[1]}, {0: gt[0], 1: gt[1]}, 0, 10, Pose.identity(), gt[0])


# ---------------------------------------------------------------- properties


@given(st.integers(0, 2**32 - 1))
def test_pnp_recovers_random_pose(seed):
    r = np.random.default_rng(seed)
    R = Rotation.from_rotvec(r.normal(0, 0.3, 3)).as_matrix()
    pose = Pose(R, r.uniform(-2, 2, 3))
    X = np.c_[r.uniform(-6, 6, 20), r.uniform(-4, 4, 20), r.uniform(15, 30, 20)]
    X = (X - pose.t) @ R  # place points in front of the camera
    uv = (X @ R.T + pose.t)
    uv = uv[:, :2] / uv[:, 2:] * 500 + [320, 240]
    est = pnp_solve(X, uv, K)
    assert _pose_close(est, pose, 1e-6)


@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0))
def test_umeyama_recovers_similarity(seed, scale):
    r = np.random.default_rng(seed)
    X = r.standard_normal((8, 3))
    R = Rotation.random(random_state=seed % 1000).as_matrix()
    t = r.standard_normal(3)
    T = umeyama(X, scale * X @ R.T + t)
    assert abs(T.scale - scale) < 1e-9 * max(1, scale)
    assert np.abs(T.R - R).max() < 1e-9
    assert np.abs(T.t - t).max() < 1e-9


@given(st.integers(0, 2**32 - 1))
def test_ransac_inliers_satisfy_threshold(seed):
    r = np.random.default_rng(seed)
    x1, x2, F_true = two_view(r, 40)
    o1, o2 = far_outliers(r, F_true, 10, 8.0)
    a, b = np.r_[x1 + r.normal(0, 0.3, x1.shape), o1], np.r_[x2, o2]
    F, mask = ransac_fundamental(a, b, 2.0, 500, seed=seed)
    assert np.all(sampson_distances(F, a[mask], b[mask]) <= 2.0)
