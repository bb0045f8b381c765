"""Synthetic experiment pipelines shared by the CLI, scripts and acceptance tests.

A :class:`Scenario` gathers every generator parameter and seed. It
round-trips through a plain ``key=value`` manifest, so any run can be
reproduced from the manifest alone.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from irloc.core import FLOAT, DescriptorSet
from irloc.evaluation import (
    EvalRecord,
    RelocParams,
    RelocRecord,
    place_recognition_records,
    recall_at_full_precision,
    relocalize_sequence,
    timelapse_eval,
    uniform_query_ids,
)
from irloc.loopdet import LoopParams, match_descriptors
from irloc.mapfile import MapFile, build_map
from irloc.simgen import (
    DriftedMap,
    DriftModel,
    MapDrift,
    PassSpec,
    Sequence,
    World,
    WorldParams,
    default_intrinsics,
    generate_pass,
    generate_world,
    simulate_map,
    static_timelapse,
)
from irloc.vocab import Vocabulary, assign_idf, build_training_pool, build_vocabulary


@dataclass(frozen=True)
class Scenario:
    world: WorldParams = WorldParams()
    drift: DriftModel = DriftModel()
    map_drift: MapDrift = MapDrift()
    kind: str = FLOAT
    world_seed: int = 1
    training_seed: int = 100
    training_taus: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    training_sweep: float = math.pi / 2
    k: int = 10
    levels: int = 5
    vocab_seed: int = 0
    day_taus: tuple[float, ...] = (0.0, 0.02)
    night_taus: tuple[float, ...] = (0.5, 0.48)
    pass_seed: int = 10
    spacing: float = 2.0
    max_range: float = 30.0
    n_queries: int = 100
    radius_m: float = 10.0
    map_sweep: float = 1.5 * math.pi
    map_seed: int = 5
    timelapse_steps: int = 144  # one frame every ten minutes
    timelapse_seed: int = 3

    # ---------------------------------------------------------- manifest

    def to_manifest(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in _flatten(self))

    @classmethod
    def from_manifest(cls, text: str) -> "Scenario":
        values = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"manifest line {ln}: expected key=value")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
        return cls().with_overrides(values)

    def with_overrides(self, values: dict[str, str]) -> "Scenario":
        nested: dict[str, dict[str, str]] = {}
        top: dict[str, str] = {}
        for k, v in values.items():
            if "." in k:
                head, tail = k.split(".", 1)
                nested.setdefault(head, {})[tail] = v
            else:
                top[k] = v
        changes = {}
        for f in dataclasses.fields(self):
            cur = getattr(self, f.name)
            if dataclasses.is_dataclass(cur):
                sub = nested.pop(f.name, {})
                sub_changes = {}
                for sf in dataclasses.fields(cur):
                    if sf.name in sub:
                        sub_changes[sf.name] = _parse(sub.pop(sf.name), getattr(cur, sf.name))
                if sub:
                    raise ValueError(f"unknown manifest keys: {', '.join(f'{f.name}.{k}' for k in sub)}")
                if sub_changes:
                    changes[f.name] = dataclasses.replace(cur, **sub_changes)
            elif f.name in top:
                changes[f.name] = _parse(top.pop(f.name), cur)
        unknown = list(top) + [f"{h}.{k}" for h, d in nested.items() for k in d]
        if unknown:
            raise ValueError(f"unknown manifest keys: {', '.join(unknown)}")
        return dataclasses.replace(self, **changes)

    # ---------------------------------------------------------- data

    def test_world(self) -> World:
        return generate_world(self.world, self.world_seed)

    def training_world(self) -> World:
        return generate_world(self.world, self.training_seed)

    def pass_spec(self, tau: float, index: int, sweep: float = 2 * math.pi) -> PassSpec:
        return PassSpec(tau=tau, sweep=sweep, spacing=self.spacing, seed=self.pass_seed + index)

    def passes(self, world: World | None = None) -> dict[str, Sequence]:
        """Two day and two night loops over the test world."""
        world = world or self.test_world()
        out = {}
        taus = [("day", t) for t in self.day_taus] + [("night", t) for t in self.night_taus]
        counters = {"day": 0, "night": 0}
        for i, (cond, tau) in enumerate(taus):
            counters[cond] += 1
            out[f"{cond}{counters[cond]}"] = generate_pass(
                world, self.pass_spec(tau, i), drift=self.drift, kind=self.kind, max_range=self.max_range
            )
        return out

    def training_pairs(self) -> list[tuple[DescriptorSet, DescriptorSet, np.ndarray]]:
        """Sequential frame pairs from the training world, matched within each pass."""
        world = self.training_world()
        pairs = []
        for i, tau in enumerate(self.training_taus):
            spec = PassSpec(tau=tau, sweep=self.training_sweep, spacing=self.spacing, seed=self.training_seed + 1 + i)
            seq = generate_pass(world, spec, drift=self.drift, kind=self.kind, max_range=self.max_range)
            for a, b in zip(seq.frames[:-1:2], seq.frames[1::2]):
                pairs.append((a, b, match_descriptors(a, b)))
        return pairs

    def timelapse_taus(self) -> np.ndarray:
        return np.arange(self.timelapse_steps + 1) / self.timelapse_steps


def _flatten(obj, prefix: str = ""):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            yield from _flatten(v, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", _format(v)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, like):
    if isinstance(like, bool):
        return text.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        if not text:
            return ()
        return tuple(_parse(x, like[0] if like else 0.0) for x in text.split(","))
    return text


def train_vocabulary(sc: Scenario, pairs=None) -> Vocabulary:
    """Vocabulary from matched training features; IDF from the training images."""
    pairs = pairs if pairs is not None else sc.training_pairs()
    pool = build_training_pool(pairs)
    v = build_vocabulary(pool, sc.k, sc.levels, sc.vocab_seed)
    images = [img for a, b, _ in pairs for img in (a, b)]
    return assign_idf(v, images)


# ---------------------------------------------------------------- place recognition


@dataclass
class RecallResult:
    database: str
    queries: str
    threshold: int
    recall: float
    records: list[EvalRecord] = field(repr=False)

    @property
    def cross_condition(self) -> bool:
        return self.database.rstrip("0123456789") != self.queries.rstrip("0123456789")


RECALL_PAIRS = (("day1", "day2"), ("night1", "night2"), ("day1", "night2"), ("night1", "day2"))


def run_place_recognition(
    sc: Scenario, vocab: Vocabulary | None = None, passes=None, params: LoopParams = LoopParams()
) -> list[RecallResult]:
    vocab = vocab or train_vocabulary(sc)
    passes = passes or sc.passes()
    out = []
    for dbn, qn in RECALL_PAIRS:
        db_seq, q_seq = passes[dbn], passes[qn]
        qids = uniform_query_ids(len(q_seq), sc.n_queries)
        recs = place_recognition_records(
            vocab, db_seq.frames, db_seq.positions(), q_seq.frames, q_seq.positions(), qids, sc.radius_m, params
        )
        T, r = recall_at_full_precision(recs)
        out.append(RecallResult(dbn, qn, T, r, recs))
    return out


# ---------------------------------------------------------------- relocalization


DEFAULT_RELOC = RelocParams(loop=LoopParams(alpha=0.2, min_inliers=0), min_inliers=15)


@dataclass
class RelocResult:
    records: list[RelocRecord]
    query_positions: np.ndarray
    nearest_keyframe_m: np.ndarray  # ground-truth distance to the closest map keyframe
    diameter_m: float
    in_map_m: float
    gate_m: float

    @property
    def in_map(self) -> np.ndarray:
        return self.nearest_keyframe_m <= self.in_map_m

    @property
    def outside(self) -> np.ndarray:
        return self.nearest_keyframe_m > self.gate_m

    @property
    def accepted(self) -> np.ndarray:
        return np.array([r.accepted for r in self.records], dtype=bool)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error_m if r.accepted else np.nan for r in self.records], dtype=np.float64)

    def in_map_success_rate(self, max_error_fraction: float = 0.01) -> float:
        ok = self.accepted & (self.errors < max_error_fraction * self.diameter_m)
        return float(ok[self.in_map].mean()) if self.in_map.any() else 0.0

    def outside_accepted(self) -> int:
        return int((self.accepted & self.outside).sum())

    def summary(self) -> dict:
        err = self.errors[self.accepted]
        return {
            "queries": len(self.records),
            "in_map_queries": int(self.in_map.sum()),
            "outside_queries": int(self.outside.sum()),
            "accepted": int(self.accepted.sum()),
            "in_map_success_rate": self.in_map_success_rate(),
            "outside_accepted": self.outside_accepted(),
            "diameter_m": self.diameter_m,
            "median_error_m": float(np.median(err)) if len(err) else None,
            "max_error_m": float(np.max(err)) if len(err) else None,
        }


def trajectory_diameter(positions: np.ndarray) -> float:
    p = np.asarray(positions, dtype=np.float64)
    if len(p) < 2:
        return 0.0
    d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(-1)
    return float(np.sqrt(d2.max()))


def build_day_map(sc: Scenario, vocab: Vocabulary, world: World | None = None) -> tuple[MapFile, DriftedMap, Sequence]:
    """Map from a partial day loop with drifting keyframe poses."""
    world = world or sc.test_world()
    spec = sc.pass_spec(sc.day_taus[0], 0, sweep=sc.map_sweep)
    day = generate_pass(world, spec, drift=sc.drift, kind=sc.kind, max_range=sc.max_range)
    dm = simulate_map(world, day, sc.map_drift, seed=sc.map_seed)
    mp = build_map(vocab, dm.keyframe_poses, day.frames, dm.landmark_ids, dm.landmark_positions)
    return mp, dm, day


def run_relocalization(
    sc: Scenario,
    vocab: Vocabulary | None = None,
    params: RelocParams = DEFAULT_RELOC,
    roundtrip: bool = True,
) -> RelocResult:
    """Night loop relocalized against a day map that covers only part of the loop."""
    vocab = vocab or train_vocabulary(sc)
    world = sc.test_world()
    mp, dm, _ = build_day_map(sc, vocab, world)
    if roundtrip:
        mp = MapFile.from_bytes(mp.to_bytes(), vocab)
    night = generate_pass(
        world, sc.pass_spec(sc.night_taus[0], len(sc.day_taus)), drift=sc.drift, kind=sc.kind, max_range=sc.max_range
    )
    qgt = night.positions()
    kf_gt = {i: p for i, p in enumerate(dm.gt_positions)}
    recs = relocalize_sequence(mp, vocab, night.frames, default_intrinsics(), kf_gt, qgt, params)
    nearest = np.array([np.min(np.linalg.norm(dm.gt_positions - q, axis=1)) for q in qgt])
    return RelocResult(recs, qgt, nearest, trajectory_diameter(qgt), sc.spacing, params.gate_m)


# ---------------------------------------------------------------- timelapse


@dataclass
class TimelapseResult:
    taus: np.ndarray
    counts: dict[str, np.ndarray]
    visible: int

    def at(self, kind: str, tau: float) -> int:
        return int(self.counts[kind][int(np.argmin(np.abs(self.taus - tau)))])


def run_timelapse(sc: Scenario, kinds=("float", "binary"), px_tol: float = 3.0) -> TimelapseResult:
    world = sc.test_world()
    taus = sc.timelapse_taus()
    counts = {}
    visible = 0
    for kind in kinds:
        seq = static_timelapse(world, taus, drift=sc.drift, kind=kind, seed=sc.timelapse_seed, max_range=sc.max_range)
        counts[kind] = timelapse_eval(seq.frames, seq.truths, 0, px_tol)
        visible = len(seq.frames[0])
    return TimelapseResult(taus, counts, visible)
