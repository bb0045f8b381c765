"""Recall at full precision for float and binary vocabularies on the four day/night pass pairs."""

import argparse
import dataclasses
import json

from irloc.experiments import Scenario, run_place_recognition, train_vocabulary


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--json", help="write results here as well")
    args = ap.parse_args()
    rows = []
    for kind in ("float", "binary"):
        sc = dataclasses.replace(Scenario(), kind=kind)
        for r in run_place_recognition(sc, train_vocabulary(sc)):
            rows.append({"kind": kind, "database": r.database, "queries": r.queries,
                         "threshold": r.threshold, "recall": r.recall})
    print(f"{'kind':<7}{'database':<10}{'queries':<10}{'T':>5}{'recall':>8}")
    for r in rows:
        print(f"{r['kind']:<7}{r['database']:<10}{r['queries']:<10}{r['threshold']:>5}{r['recall']:>8.2f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
