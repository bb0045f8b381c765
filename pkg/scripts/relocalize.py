"""Night pass relocalized against a drifting day map covering part of the loop."""

import argparse
import json

import numpy as np

from irloc.experiments import Scenario, run_relocalization


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--csv", help="per-frame records")
    args = ap.parse_args()
    res = run_relocalization(Scenario())
    print(json.dumps(res.summary(), indent=2))
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("query_id,status,keyframe,inliers,nearest_keyframe_m,error_m\n")
            for r, d in zip(res.records, res.nearest_keyframe_m):
                err = "" if r.error_m is None or np.isnan(r.error_m) else f"{r.error_m:.4f}"
                kf = "" if r.matched_keyframe is None else r.matched_keyframe
                f.write(f"{r.query_id},{r.status},{kf},{r.inliers},{d:.3f},{err}\n")


if __name__ == "__main__":
    main()
