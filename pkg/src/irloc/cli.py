"""``irloc`` command line.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from irloc.core import BINARY, FLOAT, read_descriptor_set, write_descriptor_set, write_matches
from irloc.errors import IrlocError
from irloc.geom import Pose
from irloc.index import ImageDatabase, transform
from irloc.loopdet import LoopDetector, LoopParams, matches_dir_matcher
from irloc.mapfile import MapFile, build_map
from irloc.preprocess import ClaheParams, clahe, read_pgm, write_pgm
from irloc.vocab import assign_idf, build_training_pool, build_vocabulary, load_vocabulary, save_vocabulary

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- file helpers


def frame_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {d}")
    return sorted(d.glob("*.dsc"))


def load_frames(directory):
    return [read_descriptor_set(p) for p in frame_files(directory)]


def write_frames(directory, frames) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_descriptor_set(f, d / f"{i:05d}.dsc")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_gt(path, positions) -> None:
    write_csv(
        path,
        ["entry_id", "t_unix_s", "x_m", "y_m", "z_m"],
        [[i, f"{float(i):.3f}", *(f"{x:.6f}" for x in p)] for i, p in enumerate(positions)],
    )


def read_gt(path) -> dict[int, np.ndarray]:
    try:
        return {int(r["entry_id"]): np.array([float(r["x_m"]), float(r["y_m"]), float(r["z_m"])]) for r in read_csv(path)}
    except (KeyError, ValueError) as e:
        raise IrlocError(f"malformed ground-truth CSV {path}: {e}") from None


def write_poses(path, poses) -> None:
    rows = []
    for i, p in enumerate(poses):
        qx, qy, qz, qw = Rotation.from_matrix(p.R).as_quat()
        rows.append([i, *(f"{v:.9f}" for v in (qw, qx, qy, qz, *p.t))])
    write_csv(path, ["entry_id", "qw", "qx", "qy", "qz", "tx", "ty", "tz"], rows)


def read_poses(path) -> dict[int, Pose]:
    out = {}
    try:
        for r in read_csv(path):
            q = [float(r[k]) for k in ("qx", "qy", "qz", "qw")]
            t = np.array([float(r[k]) for k in ("tx", "ty", "tz")])
            out[int(r["entry_id"])] = Pose(Rotation.from_quat(q).as_matrix(), t)
    except (KeyError, ValueError) as e:
        raise IrlocError(f"malformed pose CSV {path}: {e}") from None
    return out


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(args, header, rows, summary=None) -> None:
    if getattr(args, "out_csv", None):
        write_csv(args.out_csv, header, rows)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    if summary is not None:
        if getattr(args, "out_json", None):
            write_json(args.out_json, summary)
        else:
            print(json.dumps(summary, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------- commands


def _tiles(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected XxY, got {text!r}") from None
    return x, y


def cmd_clahe(args) -> None:
    img = read_pgm(args.input)
    try:
        params = ClaheParams(args.tiles[0], args.tiles[1], args.clip)
    except IrlocError as e:
        raise UsageError(str(e)) from None
    write_pgm(clahe(img, params), args.output)


def _scenario(args):
    from irloc.experiments import Scenario

    sc = Scenario.from_manifest(Path(args.manifest).read_text()) if args.manifest else Scenario()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    if args.seed is not None:
        overrides["world_seed"] = str(args.seed)
    if args.kind is not None:
        overrides["kind"] = args.kind
    try:
        return sc.with_overrides(overrides)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_simgen(args) -> None:
    from irloc.simgen import generate_pass, simulate_map, static_timelapse

    sc = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text(sc.to_manifest())

    pairs_dir = out / "pairs"
    pairs_dir.mkdir(exist_ok=True)
    for i, (a, b, m) in enumerate(sc.training_pairs()):
        write_descriptor_set(a, pairs_dir / f"{i:05d}.a.dsc")
        write_descriptor_set(b, pairs_dir / f"{i:05d}.b.dsc")
        write_matches(m, pairs_dir / f"{i:05d}.mch")

    world = sc.test_world()
    for name, seq in sc.passes(world).items():
        write_frames(out / name, seq.frames)
        write_gt(out / f"{name}_gt.csv", seq.positions())

    spec = sc.pass_spec(sc.day_taus[0], 0, sweep=sc.map_sweep)
    day = generate_pass(world, spec, drift=sc.drift, kind=sc.kind, max_range=sc.max_range)
    dm = simulate_map(world, day, sc.map_drift, seed=sc.map_seed)
    write_frames(out / "map_frames", day.frames)
    write_poses(out / "map_keyframes.csv", dm.keyframe_poses)
    write_gt(out / "map_gt.csv", dm.gt_positions)
    write_csv(
        out / "map_landmarks.csv",
        ["landmark_id", "x_m", "y_m", "z_m"],
        [[int(i), *(f"{x:.6f}" for x in p)] for i, p in zip(dm.landmark_ids, dm.landmark_positions)],
    )

    taus = sc.timelapse_taus()
    for kind in (FLOAT, BINARY):
        seq = static_timelapse(world, taus, drift=sc.drift, kind=kind, seed=sc.timelapse_seed, max_range=sc.max_range)
        d = out / f"timelapse_{kind}"
        write_frames(d, seq.frames)
        rows = []
        for fi, (tau, t) in enumerate(zip(taus, seq.truths)):
            for lid, (u, v) in zip(t.landmark_ids, t.projections):
                rows.append([fi, f"{tau:.6f}", int(lid), f"{u:.6f}", f"{v:.6f}"])
        write_csv(d / "truth.csv", ["frame", "tau", "landmark_id", "u", "v"], rows)


def _read_pairs(directory):
    from irloc.core import read_matches
    from irloc.loopdet import match_descriptors

    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {d}")
    pairs = []
    for a_path in sorted(d.glob("*.a.dsc")):
        stem = a_path.name[: -len(".a.dsc")]
        b_path = d / f"{stem}.b.dsc"
        if not b_path.exists():
            raise IrlocError(f"pair {stem} has no .b.dsc partner")
        a, b = read_descriptor_set(a_path), read_descriptor_set(b_path)
        m_path = d / f"{stem}.mch"
        m = read_matches(m_path) if m_path.exists() else match_descriptors(a, b)
        pairs.append((a, b, m))
    return pairs


def cmd_vocab_train(args) -> None:
    if args.k < 2 or args.levels < 1:
        raise UsageError("need --k >= 2 and --levels >= 1")
    if args.k**args.levels > 10**5:
        print(f"irloc: warning: {args.k}^{args.levels} words exceeds 10^5; large vocabularies tend to generalise worse", file=sys.stderr)
    pairs = _read_pairs(args.pairs)
    pool = build_training_pool(pairs)
    v = build_vocabulary(pool, args.k, args.levels, args.seed)
    v = assign_idf(v, [img for a, b, _ in pairs for img in (a, b)])
    save_vocabulary(v, args.out)
    print(f"words={v.word_count} nodes={v.node_count} features={pool.feature_count}", file=sys.stderr)


def cmd_db_build(args) -> None:
    v = load_vocabulary(args.vocab)
    db = ImageDatabase(v, args.di_levels)
    for f in load_frames(args.frames):
        db.add_image(f, keep_descriptors=not args.no_descriptors)
    db.save(args.out)


def cmd_db_query(args) -> None:
    v = load_vocabulary(args.vocab)
    db = ImageDatabase.load(args.db, v, args.di_levels)
    rows = []
    for p in [Path(q) for q in args.query]:
        bow, _ = transform(v, read_descriptor_set(p), db.di_levels)
        for rank, (eid, s) in enumerate(db.query(bow, args.max_results), 1):
            rows.append([p.stem, rank, eid, f"{s:.6f}"])
    _emit(args, ["query", "rank", "entry_id", "score"], rows)


def _loop_params(args, **extra) -> LoopParams:
    try:
        return LoopParams(
            alpha=args.alpha,
            max_island_gap=args.max_island_gap,
            temporal_k=args.temporal_k,
            dislocal=args.dislocal,
            min_inliers=args.min_inliers,
            ratio=args.ratio,
            binary_threshold=args.binary_threshold,
            seed=args.ransac_seed,
            **extra,
        )
    except IrlocError as e:
        raise UsageError(str(e)) from None


def cmd_loopdetect(args) -> None:
    v = load_vocabulary(args.vocab)
    db = ImageDatabase.load(args.db, v, args.di_levels) if args.db else ImageDatabase(v, args.di_levels)
    det = LoopDetector(v, db, _loop_params(args), args.mode)
    rows, accepted = [], 0
    for p in frame_files(args.queries):
        matcher = matches_dir_matcher(args.matches_dir, p.stem) if args.matches_dir else None
        res = det.process(read_descriptor_set(p), add=args.online, matcher=matcher)
        c = res.candidate
        accepted += res.accepted
        rows.append(
            [p.stem, res.status.value]
            + ([c.entry_id, f"{c.score:.6f}", c.inlier_count, len(c.matches)] if c else ["", "", "", ""])
        )
    _emit(args, ["query", "status", "entry_id", "score", "inliers", "matches"], rows, {"queries": len(rows), "accepted": accepted})


def cmd_eval_recall(args) -> None:
    from irloc.evaluation import place_recognition_records, recall_at_full_precision, uniform_query_ids

    v = load_vocabulary(args.vocab)
    db_frames = load_frames(args.db_frames)
    q_frames = load_frames(args.queries)
    db_gt, q_gt = read_gt(args.db_gt), read_gt(args.gt)
    try:
        db_pos = np.array([db_gt[i] for i in range(len(db_frames))])
        q_pos = np.array([q_gt[i] for i in range(len(q_frames))])
    except KeyError as e:
        raise IrlocError(f"ground truth lacks entry {e}") from None
    params = _loop_params(args)
    recs = place_recognition_records(
        v, db_frames, db_pos, q_frames, q_pos, uniform_query_ids(len(q_frames), args.n_queries), args.radius, params
    )
    T, recall = recall_at_full_precision(recs)
    rows = [[r.query_id, r.candidate_id, f"{r.bow_score:.6f}", r.inlier_count, int(r.is_true_positive)] for r in recs]
    _emit(
        args,
        ["query_id", "candidate_id", "bow_score", "inlier_count", "is_true_positive"],
        rows,
        {"threshold": T, "recall": recall, "queries": len({r.query_id for r in recs}), "radius_m": args.radius},
    )


def cmd_map_build(args) -> None:
    v = load_vocabulary(args.vocab)
    frames = load_frames(args.frames)
    poses = read_poses(args.keyframes)
    try:
        ordered = [poses[i] for i in range(len(frames))]
    except KeyError as e:
        raise IrlocError(f"keyframe CSV lacks entry {e}") from None
    rows = read_csv(args.landmarks)
    try:
        ids = np.array([int(r["landmark_id"]) for r in rows], dtype=np.int64)
        pos = np.array([[float(r["x_m"]), float(r["y_m"]), float(r["z_m"])] for r in rows]).reshape(-1, 3)
    except (KeyError, ValueError) as e:
        raise IrlocError(f"malformed landmark CSV: {e}") from None
    order = np.argsort(ids, kind="stable")
    build_map(v, ordered, frames, ids[order], pos[order], args.di_levels).save(args.out)


def cmd_reloc(args) -> None:
    from irloc.evaluation import RelocParams, relocalize_sequence
    from irloc.geom import Intrinsics
    from irloc.simgen import default_intrinsics

    v = load_vocabulary(args.vocab)
    mp = MapFile.load(args.map, v, args.di_levels)
    queries = load_frames(args.queries)
    q_gt = read_gt(args.gt) if args.gt else None
    kf_gt = read_gt(args.map_gt) if args.map_gt else None
    if args.intrinsics:
        try:
            K = Intrinsics(*(float(x) for x in args.intrinsics.split(",")))
        except (TypeError, ValueError):
            raise UsageError("--intrinsics expects fx,fy,cx,cy") from None
    else:
        K = default_intrinsics()
    params = RelocParams(
        loop=_loop_params(args),
        min_inliers=args.min_inliers,
        pnp_threshold_px=args.pnp_threshold,
        gate_m=args.gate_m,
        window=args.window,
    )
    q_list = [q_gt[i] for i in range(len(queries))] if q_gt is not None else None
    recs = relocalize_sequence(mp, v, queries, K, kf_gt, q_list, params)
    rows = []
    for r in recs:
        pos = ["", "", ""] if r.position is None else [f"{x:.6f}" for x in r.position]
        err = "" if r.error_m is None else f"{r.error_m:.6f}"
        kf = "" if r.matched_keyframe is None else r.matched_keyframe
        rows.append([r.query_id, r.status, kf, r.inliers, *pos, err])
    errs = [r.error_m for r in recs if r.accepted and r.error_m is not None and not math.isnan(r.error_m)]
    summary = {
        "queries": len(recs),
        "accepted": sum(r.accepted for r in recs),
        "median_error_m": float(np.median(errs)) if errs else None,
        "max_error_m": float(np.max(errs)) if errs else None,
    }
    _emit(args, ["query_id", "status", "matched_keyframe", "inliers", "x_m", "y_m", "z_m", "error_m"], rows, summary)


def cmd_timelapse(args) -> None:
    from irloc.evaluation import timelapse_eval
    from irloc.simgen import FrameTruth

    frames = load_frames(args.frames)
    by_frame: dict[int, list] = {}
    taus: dict[int, float] = {}
    for r in read_csv(args.truth):
        try:
            fi = int(r["frame"])
            by_frame.setdefault(fi, []).append((int(r["landmark_id"]), float(r["u"]), float(r["v"])))
            taus[fi] = float(r.get("tau") or "nan")
        except (KeyError, ValueError) as e:
            raise IrlocError(f"malformed truth CSV: {e}") from None
    truths = []
    for i in range(len(frames)):
        rows = sorted(by_frame.get(i, []))
        ids = np.array([x[0] for x in rows], dtype=np.int64)
        proj = np.array([[x[1], x[2]] for x in rows], dtype=np.float64).reshape(-1, 2)
        truths.append(FrameTruth(Pose.identity(), taus.get(i, float("nan")), ids, proj))
    params = _loop_params(args)
    counts = timelapse_eval(frames, truths, args.ref, args.px_tol, params)
    rows = [[i, f"{taus.get(i, float('nan')):.6f}", int(c)] for i, c in enumerate(counts)]
    _emit(args, ["frame", "tau", "correct_matches"], rows, {"ref": args.ref, "px_tol": args.px_tol, "max": int(counts.max()), "min": int(counts.min())})


def cmd_bench(args) -> None:
    from irloc.bench import bench_database, bench_distances

    if args.what == "distances":
        rep = bench_distances(args.dim, args.bits, args.n_pairs, args.seed).as_dict()
    else:
        rep = bench_database(args.entries, args.features, None, args.seed, args.dim).as_dict()
    print(json.dumps(rep, indent=2, sort_keys=True))
    if args.out_json:
        write_json(args.out_json, rep)


# ---------------------------------------------------------------- parser


def _add_loop_args(p, min_inliers: int = 12, alpha: float = 0.3) -> None:
    g = p.add_argument_group("loop detection")
    g.add_argument("--alpha", type=float, default=alpha)
    g.add_argument("--max-island-gap", type=int, default=3)
    g.add_argument("--temporal-k", type=int, default=3)
    g.add_argument("--dislocal", type=int, default=20)
    g.add_argument("--min-inliers", type=int, default=min_inliers)
    g.add_argument("--ratio", type=float, default=0.8)
    g.add_argument("--binary-threshold", type=int, default=64)
    g.add_argument("--ransac-seed", type=int, default=0)


def _add_outputs(p) -> None:
    p.add_argument("--out-csv")
    p.add_argument("--out-json")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="irloc", description="Thermal place recognition and relocalization toolkit")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("clahe", help="contrast-limited adaptive histogram equalization of a PGM")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--tiles", type=_tiles, default=(8, 8), help="grid as XxY, e.g. 8x8")
    p.add_argument("--clip", type=float, default=3.0)
    p.set_defaults(func=cmd_clahe)

    p = sub.add_parser("simgen", help="generate a synthetic scenario")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="scenario manifest (key=value) to reproduce")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one manifest key")
    p.add_argument("--seed", type=int, help="test world seed")
    p.add_argument("--kind", choices=[FLOAT, BINARY])
    p.set_defaults(func=cmd_simgen)

    p = sub.add_parser("vocab-train", help="train a vocabulary tree from matched image pairs")
    p.add_argument("--pairs", required=True, help="directory of <stem>.a.dsc/<stem>.b.dsc[/<stem>.mch]")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--levels", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vocab_train)

    p = sub.add_parser("db-build", help="build an image database from a directory of frames")
    p.add_argument("--vocab", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--di-levels", type=int, default=2)
    p.add_argument("--no-descriptors", action="store_true")
    p.set_defaults(func=cmd_db_build)

    p = sub.add_parser("db-query", help="rank database entries for query frames")
    p.add_argument("--vocab", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--query", required=True, nargs="+")
    p.add_argument("--max-results", type=int, default=10)
    p.add_argument("--di-levels", type=int, default=2)
    _add_outputs(p)
    p.set_defaults(func=cmd_db_query)

    p = sub.add_parser("loopdetect", help="run loop detection over a query sequence")
    p.add_argument("--vocab", required=True)
    p.add_argument("--db", help="existing database; omitted means start empty")
    p.add_argument("--queries", required=True)
    p.add_argument("--mode", choices=["best", "islands"], default="islands")
    p.add_argument("--online", action="store_true", help="append each query to the database after detection")
    p.add_argument("--matches-dir", help="precomputed matches <query>__<entry>.mch")
    p.add_argument("--di-levels", type=int, default=2)
    _add_loop_args(p)
    _add_outputs(p)
    p.set_defaults(func=cmd_loopdetect)

    p = sub.add_parser("eval-recall", help="recall at 100%% precision, best-candidate protocol")
    p.add_argument("--vocab", required=True)
    p.add_argument("--db-frames", required=True)
    p.add_argument("--db-gt", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--n-queries", type=int, default=100)
    p.add_argument("--radius", type=float, default=10.0)
    _add_loop_args(p, min_inliers=0)
    _add_outputs(p)
    p.set_defaults(func=cmd_eval_recall)

    p = sub.add_parser("map-build", help="assemble a .map file from keyframes and landmarks")
    p.add_argument("--vocab", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--keyframes", required=True, help="pose CSV entry_id,qw,qx,qy,qz,tx,ty,tz")
    p.add_argument("--landmarks", required=True, help="CSV landmark_id,x_m,y_m,z_m")
    p.add_argument("--out", required=True)
    p.add_argument("--di-levels", type=int, default=2)
    p.set_defaults(func=cmd_map_build)

    p = sub.add_parser("reloc", help="relocalize query frames against a map")
    p.add_argument("--map", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", help="query ground truth CSV")
    p.add_argument("--map-gt", help="keyframe ground truth CSV (needed for errors)")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--gate-m", type=float, default=10.0)
    p.add_argument("--pnp-threshold", type=float, default=4.0)
    p.add_argument("--intrinsics", help="fx,fy,cx,cy (default: synthetic camera)")
    p.add_argument("--di-levels", type=int, default=2)
    _add_loop_args(p, min_inliers=15, alpha=0.2)
    _add_outputs(p)
    p.set_defaults(func=cmd_reloc)

    p = sub.add_parser("timelapse", help="correct-match counts of a static sequence against one frame")
    p.add_argument("--frames", required=True)
    p.add_argument("--truth", required=True, help="CSV frame,tau,landmark_id,u,v")
    p.add_argument("--ref", type=int, default=0)
    p.add_argument("--px-tol", type=float, default=3.0)
    _add_loop_args(p)
    _add_outputs(p)
    p.set_defaults(func=cmd_timelapse)

    p = sub.add_parser("bench", help="micro-benchmarks")
    p.add_argument("what", choices=["distances", "database"])
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--bits", type=int, default=256)
    p.add_argument("--n-pairs", type=int, default=20000)
    p.add_argument("--entries", type=int, default=1000)
    p.add_argument("--features", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as e:
        print(f"irloc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (IrlocError, ValueError, OSError) as e:
        print(f"irloc: error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
