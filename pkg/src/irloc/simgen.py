"""Synthetic loop-corridor world with a diurnal appearance-drift model.

Landmarks line the two walls of a circular corridor. Each carries a day
("base") and night appearance; a learned-style float descriptor blends the
two with weight ``lambda(tau) = sin^2(pi * tau)`` and adds observation noise.
Binary descriptors start from the sign bits of the base appearance; a fixed
per-landmark subset of bits (``flip_mask_fraction``) switches to an
independent night code with probability ``lambda``, so each masked bit
differs from the day code with probability ``lambda / 2``, while the other
bits flip with probability ``sigma_obs``.

Appearances are not uniform on the sphere. Each landmark has a latent
appearance in a ``latent_dim``-dimensional subspace shared by all worlds built
with the same ``appearance_seed`` (real scenes share local structure). Its day
and night vectors are independent full-dimensional perturbations of that
latent of relative size ``spread``; with ``latent_dim == 0`` they are
independent uniform directions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from irloc.core import BINARY, FLOAT, DescriptorSet
from irloc.geom import Intrinsics, Pose, project, rodrigues

FRAME_WIDTH = 640
FRAME_HEIGHT = 512
HFOV_DEG = 75.0


def default_intrinsics() -> Intrinsics:
    f = (FRAME_WIDTH / 2) / math.tan(math.radians(HFOV_DEG / 2))
    return Intrinsics(f, f, FRAME_WIDTH / 2, FRAME_HEIGHT / 2)


@dataclass(frozen=True)
class WorldParams:
    loop_radius: float = 50.0
    half_width: float = 6.0
    density: float = 4.0  # landmarks per metre of corridor centre line
    height_range: tuple[float, float] = (0.0, 6.0)
    wall_jitter: float = 0.5
    dim: int = 256
    bits: int = 256
    latent_dim: int = 16
    spread: float = 0.5
    appearance_seed: int = 0

    @property
    def corridor_length(self) -> float:
        return 2.0 * math.pi * self.loop_radius

    @property
    def landmark_count(self) -> int:
        return int(math.floor(self.density * self.corridor_length))


@dataclass(frozen=True)
class DriftModel:
    sigma_obs: float = 0.05
    pixel_noise: float = 0.5
    flip_mask_fraction: float = 0.85

    @staticmethod
    def lam(tau: float) -> float:
        return math.sin(math.pi * tau) ** 2


@dataclass(frozen=True, eq=False)
class World:
    params: WorldParams
    positions: np.ndarray  # (N, 3)
    base: np.ndarray  # (N, dim) unit float
    night: np.ndarray  # (N, dim) unit float
    base_bits: np.ndarray  # (N, bits/8) uint8
    night_bits: np.ndarray  # (N, bits/8) uint8
    mask_rank: np.ndarray  # (N, bits) uniform in [0, 1); bit is diurnal if rank < fraction

    def __len__(self) -> int:
        return len(self.positions)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return x / n


def latent_basis(params: WorldParams) -> np.ndarray:
    """Orthonormal (dim, latent_dim) basis of the shared appearance subspace."""
    rng = np.random.default_rng(params.appearance_seed)
    q, _ = np.linalg.qr(rng.standard_normal((params.dim, params.latent_dim)))
    return q


def _appearances(params: WorldParams, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    d = params.dim
    g_day = rng.standard_normal((n, d)) / math.sqrt(d)
    g_night = rng.standard_normal((n, d)) / math.sqrt(d)
    if params.latent_dim == 0:
        return _unit_rows(g_day), _unit_rows(g_night)
    z = _unit_rows(rng.standard_normal((n, params.latent_dim)))
    core = z @ latent_basis(params).T
    s = params.spread
    return _unit_rows(core + s * g_day), _unit_rows(core + s * g_night)


def generate_world(params: WorldParams = WorldParams(), seed: int = 0) -> World:
    rng = np.random.default_rng(seed)
    n = params.landmark_count
    phi = 2.0 * math.pi * (np.arange(n) + rng.random(n)) / max(n, 1)
    side = np.where(np.arange(n) % 2 == 0, -1.0, 1.0)
    r = params.loop_radius + side * params.half_width + rng.uniform(-1, 1, n) * params.wall_jitter
    z = rng.uniform(*params.height_range, n)
    positions = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    base, night = _appearances(params, rng, n)
    bits_src = base if params.bits == params.dim else rng.standard_normal((n, params.bits))
    base_bits = np.packbits(bits_src > 0, axis=1)
    night_bits = np.packbits(rng.random((n, params.bits)) < 0.5, axis=1)
    mask_rank = rng.random((n, params.bits))
    return World(params, positions, base.astype(np.float32), night.astype(np.float32), base_bits, night_bits, mask_rank)


@dataclass(frozen=True, eq=False)
class FrameTruth:
    pose: Pose
    tau: float
    landmark_ids: np.ndarray
    projections: np.ndarray  # noise-free pixel positions aligned with landmark_ids


def visible_landmarks(
    world: World, pose: Pose, K: Intrinsics, max_range: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Ids (ascending) and noise-free projections of landmarks inside the frame."""
    if len(world) == 0:
        return np.zeros(0, np.int64), np.zeros((0, 2))
    uv, z = project(K, pose, world.positions)
    ok = z > 0
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < FRAME_WIDTH) & (uv[:, 1] >= 0) & (uv[:, 1] < FRAME_HEIGHT)
    if max_range is not None:
        ok &= np.linalg.norm(world.positions - pose.center, axis=1) <= max_range
    ids = np.flatnonzero(ok)
    return ids, uv[ids]


def observe(
    world: World,
    pose: Pose,
    tau: float,
    K: Intrinsics | None = None,
    drift: DriftModel = DriftModel(),
    seed: int = 0,
    kind: str = FLOAT,
    max_range: float | None = 30.0,
) -> tuple[DescriptorSet, FrameTruth]:
    K = K or default_intrinsics()
    rng = np.random.default_rng(seed)
    ids, proj = visible_landmarks(world, pose, K, max_range)
    n = len(ids)
    lam = drift.lam(tau)
    kps = proj + (rng.standard_normal((n, 2)) * drift.pixel_noise if drift.pixel_noise > 0 else 0.0)
    if kind == FLOAT:
        dim = world.params.dim
        d = (1.0 - lam) * world.base[ids].astype(np.float64) + lam * world.night[ids].astype(np.float64)
        if drift.sigma_obs > 0:
            d = d + drift.sigma_obs * rng.standard_normal((n, dim)) / math.sqrt(dim)
        desc = _unit_rows(d).astype(np.float32)
    elif kind == BINARY:
        nb = world.params.bits
        base = np.unpackbits(world.base_bits[ids], axis=1, count=nb).astype(bool)
        night = np.unpackbits(world.night_bits[ids], axis=1, count=nb).astype(bool)
        masked = world.mask_rank[ids] < drift.flip_mask_fraction
        take_night = masked & (rng.random((n, nb)) < lam)
        bits = np.where(take_night, night, base)
        flips = ~masked & (rng.random((n, nb)) < drift.sigma_obs)
        bits ^= flips
        desc = np.packbits(bits, axis=1)
    else:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    s = DescriptorSet(desc, kps.astype(np.float32), ids.astype(np.uint32))
    return s, FrameTruth(pose, tau, ids.astype(np.int64), proj)


def truth_matches(a: FrameTruth, b: FrameTruth) -> np.ndarray:
    """Index pairs (i, j) whose features observe the same landmark."""
    _, ia, ib = np.intersect1d(a.landmark_ids, b.landmark_ids, assume_unique=True, return_indices=True)
    return np.stack([ia, ib], axis=1).astype(np.int64)


# ---------------------------------------------------------------- trajectories


def loop_pose(params: WorldParams, theta: float, lateral: float = 0.0, yaw: float = 0.0, height: float = 1.5) -> Pose:
    """Camera on the corridor centre line at polar angle ``theta``, facing
    counter-clockwise along the corridor."""
    r = params.loop_radius + lateral
    center = np.array([r * math.cos(theta), r * math.sin(theta), height])
    fwd = np.array([-math.sin(theta), math.cos(theta), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, up)
    down = np.cross(fwd, right)
    R_wc = np.stack([right, down, fwd], axis=1)
    if yaw:
        R_wc = rodrigues(up * yaw) @ R_wc
    return Pose.from_center(R_wc, center)


@dataclass(frozen=True)
class PassSpec:
    tau: float
    start_theta: float = 0.0
    sweep: float = 2.0 * math.pi  # radians travelled
    spacing: float = 2.0  # metres between frames
    lateral: float = 0.0
    lateral_wobble: float = 0.3
    yaw_wobble: float = 0.03
    seed: int = 0


@dataclass
class Sequence:
    frames: list[DescriptorSet]
    truths: list[FrameTruth]
    spec: PassSpec
    kind: str = FLOAT

    def positions(self) -> np.ndarray:
        return np.array([t.pose.center for t in self.truths])

    def __len__(self) -> int:
        return len(self.frames)


def frame_seed(seed: int, index: int) -> int:
    return (seed ^ index) & 0xFFFFFFFFFFFFFFFF


def generate_pass(
    world: World,
    spec: PassSpec,
    K: Intrinsics | None = None,
    drift: DriftModel = DriftModel(),
    kind: str = FLOAT,
    max_range: float | None = 30.0,
) -> Sequence:
    K = K or default_intrinsics()
    p = world.params
    n = max(1, int(round(spec.sweep * p.loop_radius / spec.spacing)))
    rng = np.random.default_rng(spec.seed)
    # smooth per-pass deviations from the centre line
    k1, k2 = rng.uniform(0, 2 * math.pi, 2)
    frames, truths = [], []
    for i in range(n):
        theta = spec.start_theta + spec.sweep * i / n
        lat = spec.lateral + spec.lateral_wobble * math.sin(3 * theta + k1)
        yaw = spec.yaw_wobble * math.sin(5 * theta + k2)
        pose = loop_pose(p, theta, lat, yaw)
        s, t = observe(world, pose, spec.tau, K, drift, frame_seed(spec.seed, i), kind, max_range)
        frames.append(s)
        truths.append(t)
    return Sequence(frames, truths, spec, kind)


def static_timelapse(
    world: World,
    taus,
    K: Intrinsics | None = None,
    drift: DriftModel = DriftModel(),
    kind: str = FLOAT,
    seed: int = 0,
    theta: float = 0.0,
    max_range: float | None = 30.0,
) -> Sequence:
    """Fixed camera observed at each time-of-day in ``taus``."""
    pose = loop_pose(world.params, theta)
    frames, truths = [], []
    for i, tau in enumerate(taus):
        s, t = observe(world, pose, float(tau), K, drift, frame_seed(seed, i), kind, max_range)
        frames.append(s)
        truths.append(t)
    return Sequence(frames, truths, PassSpec(tau=float(taus[0]) if len(taus) else 0.0, seed=seed), kind)


# ---------------------------------------------------------------- SLAM-map stand-in


@dataclass
class DriftedMap:
    """Keyframe poses and landmark positions as a drifting SLAM map would hold them."""

    keyframe_poses: list[Pose]
    landmark_ids: np.ndarray  # world landmark ids stored in the map
    landmark_positions: np.ndarray  # (M, 3) in map frame
    gt_positions: np.ndarray  # (n_kf, 3) ground-truth keyframe centres


@dataclass(frozen=True)
class MapDrift:
    yaw_per_radian: float = 0.01  # accumulated heading drift per radian of travel
    landmark_noise: float = 0.05  # metres


def simulate_map(world: World, seq: Sequence, drift: MapDrift = MapDrift(), seed: int = 0) -> DriftedMap:
    """Express keyframes and observed landmarks in a drifting map frame.

    Drift is a rotation about the loop centre that grows with travelled angle,
    so it is locally rigid. The map origin is the first keyframe, as a SLAM
    system would initialise it.
    """
    rng = np.random.default_rng(seed)
    theta0 = seq.spec.start_theta

    def warp(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ang = np.unwrap(np.arctan2(points[:, 1], points[:, 0]) - theta0)
        ang = np.mod(ang, 2 * math.pi)
        ang[ang > 2 * math.pi - 1e-9] = 0.0  # -0.0 from arctan2 must not wrap a full turn
        a = drift.yaw_per_radian * ang
        c, s = np.cos(a), np.sin(a)
        out = points.copy()
        out[:, 0] = c * points[:, 0] - s * points[:, 1]
        out[:, 1] = s * points[:, 0] + c * points[:, 1]
        return out, a

    centers = seq.positions()
    warped_centers, kf_ang = warp(centers)
    ids = np.unique(np.concatenate([t.landmark_ids for t in seq.truths]))
    lm, _ = warp(world.positions[ids])
    lm = lm + rng.standard_normal(lm.shape) * drift.landmark_noise

    first = seq.truths[0].pose
    # map frame = first keyframe's camera frame
    R0, t0 = first.R, first.t
    to_map = lambda X: X @ R0.T + t0  # noqa: E731
    poses = []
    for truth, c_w, a in zip(seq.truths, warped_centers, kf_ang):
        R_wc = truth.pose.R.T
        Rz = rodrigues(np.array([0.0, 0.0, a]))
        R_wc_warped = Rz @ R_wc
        R_mc = R0 @ R_wc_warped
        center_m = to_map(c_w[None])[0]
        poses.append(Pose.from_center(R_mc, center_m))
    return DriftedMap(poses, ids, to_map(lm), centers)
