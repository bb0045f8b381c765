"""Robust two-view and absolute-pose geometry plus trajectory alignment.

Pose convention is world-to-camera: ``x_cam = R @ x_world + t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from irloc.errors import ConvergenceError, DegenerateError, IrlocError
from irloc.rng import XorShift64Star

RANSAC_CONFIDENCE = 0.99


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise IrlocError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_center(cls, R_wc: np.ndarray, center: np.ndarray) -> "Pose":
        """Build from camera-to-world rotation and camera centre."""
        R = np.asarray(R_wc).T
        return cls(R, -R @ np.asarray(center, dtype=np.float64))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def transform(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.R @ self.R.T, np.eye(3), atol=tol) and abs(np.linalg.det(self.R) - 1) <= tol
        )


@dataclass(frozen=True, eq=False)
class SimTransform:
    scale: float
    R: np.ndarray
    t: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(X) @ self.R.T) + self.t


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    th = float(np.linalg.norm(w))
    W = skew(w)
    if th < 1e-12:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + math.sin(th) / th * W + (1 - math.cos(th)) / th**2 * (W @ W)


def project(K: Intrinsics, pose: Pose, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel projections and camera-frame depths of world points."""
    Pc = pose.transform(X)
    z = Pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * Pc[:, 0] / z + K.cx, K.fy * Pc[:, 1] / z + K.cy], axis=1)
    return uv, z


# ---------------------------------------------------------------- epipolar


def _hartley(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(1)).mean()
    if d <= 0:
        raise DegenerateError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def fundamental_8point(x1, x2) -> np.ndarray:
    """F with x2^T F x1 = 0, rank 2, unit Frobenius norm, largest entry positive."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    if len(x1) != len(x2):
        raise IrlocError("correspondence arrays differ in length")
    if len(x1) < 8:
        raise DegenerateError(f"8-point algorithm needs >= 8 pairs, got {len(x1)}")
    T1, T2 = _hartley(x1), _hartley(x2)
    h1 = np.c_[x1, np.ones(len(x1))] @ T1.T
    h2 = np.c_[x2, np.ones(len(x2))] @ T2.T
    A = np.einsum("ni,nj->nij", h2, h1).reshape(-1, 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateError("rank-deficient 8-point design matrix")
    F = Vt[-1].reshape(3, 3)
    U, S, V2 = np.linalg.svd(F)
    F = U @ np.diag([S[0], S[1], 0.0]) @ V2
    F = T2.T @ F @ T1
    F /= np.linalg.norm(F)
    if F.flat[np.argmax(np.abs(F))] < 0:
        F = -F
    return F


def sampson_distances(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    h1 = np.c_[x1, np.ones(len(x1))]
    h2 = np.c_[x2, np.ones(len(x2))]
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    num = (h2 * Fx1).sum(1)
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.abs(num) / np.sqrt(den)
    return np.where(den > 0, d, np.where(num == 0, 0.0, np.inf))


def epipolar_error(F: np.ndarray, x, xp) -> float:
    """Sampson (first-order geometric) distance in pixels."""
    return float(sampson_distances(F, np.asarray(x)[None], np.asarray(xp)[None])[0])


def _adaptive_cap(inlier_ratio: float, sample: int, cap: int) -> int:
    if inlier_ratio <= 0:
        return cap
    if inlier_ratio >= 1:
        return 1
    denom = math.log(1.0 - inlier_ratio**sample)
    if denom >= 0:
        return cap
    return min(cap, int(math.ceil(math.log(1.0 - RANSAC_CONFIDENCE) / denom)))


def ransac_fundamental(
    x1, x2, threshold_px: float = 2.0, max_iters: int = 2000, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    n = len(x1)
    if n < 8:
        raise DegenerateError(f"RANSAC needs >= 8 pairs, got {n}")
    rng = XorShift64Star(seed)
    best_F, best_mask, best_count = None, np.zeros(n, bool), -1
    cap = max_iters
    it = 0
    while it < cap:
        it += 1
        idx = rng.sample(n, 8)
        try:
            F = fundamental_8point(x1[idx], x2[idx])
        except DegenerateError:
            continue
        mask = sampson_distances(F, x1, x2) <= threshold_px
        c = int(mask.sum())
        if c > best_count:
            best_F, best_mask, best_count = F, mask, c
            cap = min(max_iters, _adaptive_cap(c / n, 8, max_iters))
    if best_F is None:
        raise DegenerateError("no non-degenerate 8-point sample found")
    if best_count >= 8:
        try:
            F = fundamental_8point(x1[best_mask], x2[best_mask])
            mask = sampson_distances(F, x1, x2) <= threshold_px
            if mask.sum() >= best_count:
                return F, mask
        except DegenerateError:
            pass
    return best_F, best_mask


# ---------------------------------------------------------------- PnP


def _dlt_pose(X: np.ndarray, xn: np.ndarray) -> Pose:
    """Linear pose from normalised image coordinates (K already removed)."""
    c = X.mean(axis=0)
    scale = math.sqrt(3.0) / max(np.sqrt(((X - c) ** 2).sum(1)).mean(), 1e-300)
    Xs = (X - c) * scale
    T = np.eye(4)
    T[:3, :3] *= scale
    T[:3, 3] = -scale * c
    n = len(X)
    Xh = np.c_[Xs, np.ones(n)]
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:2] * Xh
    _, s, Vt = np.linalg.svd(A)
    if s[10] <= 1e-9 * s[0]:
        raise DegenerateError("degenerate PnP configuration (coplanar or collinear points)")
    P = Vt[-1].reshape(3, 4) @ T
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = P[:, :3]
    U, S, Vt2 = np.linalg.svd(M)
    R = U @ Vt2
    if np.linalg.det(R) < 0:
        raise DegenerateError("DLT produced an improper rotation")
    t = P[:, 3] / S.mean()
    return Pose(R, t)


def reprojection_errors(pose: Pose, X: np.ndarray, uv: np.ndarray, K: Intrinsics) -> np.ndarray:
    proj, z = project(K, pose, X)
    err = np.sqrt(((proj - uv) ** 2).sum(1))
    return np.where(z > 0, err, np.inf)


def _residuals(R, t, X, uv, K):
    Pc = X @ R.T + t
    z = Pc[:, 2]
    u = K.fx * Pc[:, 0] / z + K.cx
    v = K.fy * Pc[:, 1] / z + K.cy
    return np.stack([u - uv[:, 0], v - uv[:, 1]], axis=1), Pc


@dataclass
class PnPTrace:
    costs: list[float]
    iterations: int


def pnp_solve(
    points3d,
    points2d,
    K: Intrinsics,
    max_iters: int = 50,
    init: Pose | None = None,
    trace: PnPTrace | None = None,
) -> Pose:
    """DLT initialisation refined by Gauss-Newton on pixel reprojection error.

    Every accepted step is checked not to increase the cost; a step that would
    is halved until it does not.
    """
    X = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(X) != len(uv):
        raise IrlocError("3-D and 2-D arrays differ in length")
    if len(X) < 6:
        raise DegenerateError(f"PnP needs >= 6 correspondences, got {len(X)}")
    xn = np.stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy], axis=1)
    pose = init if init is not None else _dlt_pose(X, xn)
    R, t = pose.R.copy(), pose.t.copy()
    r, Pc = _residuals(R, t, X, uv, K)
    if np.any(Pc[:, 2] <= 0):
        # DLT sign ambiguity can put points behind the camera; GN cannot fix that
        if init is None and np.all(Pc[:, 2] < 0):
            raise DegenerateError("all points behind the DLT camera")
    cost = float((r * r).sum())
    costs = [cost]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        x, y, z = Pc[:, 0], Pc[:, 1], Pc[:, 2]
        n = len(X)
        J = np.zeros((2 * n, 6))
        # d(pixel)/d(camera point)
        du = np.stack([K.fx / z, np.zeros(n), -K.fx * x / z**2], axis=1)
        dv = np.stack([np.zeros(n), K.fy / z, -K.fy * y / z**2], axis=1)
        RX = Pc - t
        # left perturbation R <- exp(w) R, t <- t + dt: d(Pc)/dw = -[RX]x
        for row, d in ((0, du), (1, dv)):
            Jw = np.stack(
                [
                    d[:, 1] * (-RX[:, 2]) + d[:, 2] * RX[:, 1],
                    d[:, 0] * RX[:, 2] + d[:, 2] * (-RX[:, 0]),
                    d[:, 0] * (-RX[:, 1]) + d[:, 1] * RX[:, 0],
                ],
                axis=1,
            )
            J[row::2, :3] = Jw
            J[row::2, 3:] = d
        step, *_ = np.linalg.lstsq(J, -r.reshape(-1), rcond=None)
        alpha = 1.0
        accepted = False
        for _ in range(40):
            R_new = rodrigues(alpha * step[:3]) @ R
            t_new = t + alpha * step[3:]
            r_new, Pc_new = _residuals(R_new, t_new, X, uv, K)
            new_cost = float((r_new * r_new).sum()) if np.all(Pc_new[:, 2] > 0) else np.inf
            if new_cost <= cost:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            converged = True
            break
        small = np.linalg.norm(alpha * step) < 1e-12 or cost - new_cost <= 1e-15 * cost
        R, t, r, Pc, cost = R_new, t_new, r_new, Pc_new, new_cost
        costs.append(cost)
        if small:
            converged = True
            break
    if trace is not None:
        trace.costs = costs
        trace.iterations = it
    rms = math.sqrt(cost / len(X)) if np.isfinite(cost) else float("inf")
    if not np.isfinite(cost):
        raise ConvergenceError("PnP refinement diverged", rms)
    if not converged and len(costs) > 1 and costs[-2] - costs[-1] > 1e-6 * costs[-2]:
        raise ConvergenceError("PnP refinement did not converge", rms)
    U, _, Vt = np.linalg.svd(R)
    return Pose(U @ Vt, t)


def ransac_pnp(
    points3d,
    points2d,
    K: Intrinsics,
    threshold_px: float = 4.0,
    max_iters: int = 500,
    seed: int = 0,
) -> tuple[Pose, np.ndarray]:
    X = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    n = len(X)
    if n < 6:
        raise DegenerateError(f"RANSAC PnP needs >= 6 correspondences, got {n}")
    rng = XorShift64Star(seed)
    best_pose, best_mask, best_count = None, np.zeros(n, bool), -1
    cap = max_iters
    it = 0
    while it < cap:
        it += 1
        idx = rng.sample(n, 6)
        try:
            pose = pnp_solve(X[idx], uv[idx], K, max_iters=10)
        except (DegenerateError, ConvergenceError, np.linalg.LinAlgError):
            continue
        mask = reprojection_errors(pose, X, uv, K) <= threshold_px
        c = int(mask.sum())
        if c > best_count:
            best_pose, best_mask, best_count = pose, mask, c
            cap = min(max_iters, _adaptive_cap(c / n, 6, max_iters))
    if best_pose is None:
        raise DegenerateError("no usable 6-point PnP sample")
    if best_count >= 6:
        try:
            pose = pnp_solve(X[best_mask], uv[best_mask], K)
            mask = reprojection_errors(pose, X, uv, K) <= threshold_px
            if mask.sum() >= best_count:
                return pose, mask
        except (DegenerateError, ConvergenceError, np.linalg.LinAlgError):
            pass
    return best_pose, best_mask


# ---------------------------------------------------------------- alignment


def umeyama(src, dst, with_scale: bool = True) -> SimTransform:
    """Least-squares ``dst ~ s R src + t``."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst):
        raise IrlocError("point sets differ in length")
    if len(src) < 3:
        raise DegenerateError(f"alignment needs >= 3 points, got {len(src)}")
    mu_s, mu_d = src.mean(0), dst.mean(0)
    a, b = src - mu_s, dst - mu_d
    sv = np.linalg.svd(a, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateError("source points are collinear or coincident")
    n = len(src)
    cov = b.T @ a / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var = (a * a).sum() / n
        s = float(np.trace(np.diag(D) @ S) / var)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return SimTransform(s, R, t)


def local_alignment_error(
    map_positions: dict[int, np.ndarray],
    gt_positions: dict[int, np.ndarray],
    anchor_kf: int,
    window: int,
    reloc_pose: Pose,
    query_gt,
) -> float:
    """Rigidly align map keyframes near ``anchor_kf`` to ground truth, then
    measure the aligned relocalised camera centre against ``query_gt``."""
    ids = [
        i
        for i in range(anchor_kf - window, anchor_kf + window + 1)
        if i in map_positions and i in gt_positions
    ]
    if len(ids) < 3:
        raise DegenerateError(f"only {len(ids)} keyframes in alignment window around {anchor_kf}")
    src = np.array([map_positions[i] for i in ids])
    dst = np.array([gt_positions[i] for i in ids])
    T = umeyama(src, dst, with_scale=False)
    p = T.apply(reloc_pose.center[None])[0]
    return float(np.linalg.norm(p - np.asarray(query_gt, dtype=np.float64)))
