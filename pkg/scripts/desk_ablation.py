"""Test accuracy of the four ablation variants on the Gaussian-mixture task.

    python3 scripts/desk_ablation.py --case inverse --seeds 3
"""

import argparse
import json

from cpe.metrics import format_mean_std
from cpe.synthetic import VARIANTS, DeskTask, run_desk


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--case", default="inverse", choices=["consistent", "uniform", "inverse"])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out")
    args = p.parse_args()

    task = DeskTask()
    table = {}
    for variant in VARIANTS:
        accs = [run_desk(task, args.case, s, variant)["top1"] for s in range(args.seeds)]
        table[variant] = accs
        print(f"{variant:13s} {format_mean_std(accs)}  {[round(a, 3) for a in accs]}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"case": args.case, "top1": table}, fh, indent=1)


if __name__ == "__main__":
    main()
