"""Correct matches against the first frame of a static day-night timelapse."""

import argparse

from irloc.experiments import Scenario, run_timelapse


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--every", type=int, default=6, help="print every n-th frame")
    args = ap.parse_args()
    res = run_timelapse(Scenario())
    print(f"visible landmarks in the reference frame: {res.visible}")
    print(f"{'tau':>6}{'float':>8}{'binary':>8}")
    for i in range(0, len(res.taus), args.every):
        print(f"{res.taus[i]:>6.3f}{res.counts['float'][i]:>8}{res.counts['binary'][i]:>8}")


if __name__ == "__main__":
    main()
