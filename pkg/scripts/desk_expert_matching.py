"""Per-expert pseudo-label F1 on the Gaussian-mixture task, three cases x seeds.

    python3 scripts/desk_expert_matching.py --seeds 3 --out runs/desk_matching.json
"""

import argparse
import json
from dataclasses import replace

import numpy as np

from cpe.synthetic import DeskTask, run_desk, task_to_dict

CASES = {"consistent": 0, "uniform": 1, "inverse": 2}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps", type=int, help="override the training budget")
    p.add_argument("--out", help="write all results as JSON here")
    args = p.parse_args()

    task = DeskTask()
    if args.steps:
        task.train = replace(task.train, total_steps=args.steps)
    results = []
    for case, want in CASES.items():
        for seed in range(args.seeds):
            r = run_desk(task, case, seed)
            results.append(r)
            f1 = " ".join(f"E{i + 1}={v:.3f}" for i, v in enumerate(r["f1_overall"]))
            best = int(np.argmax(r["f1_overall"]))
            print(f"{case:10s} seed {seed}  {f1}  best E{best + 1}"
                  f"{'' if best == want else f' (expected E{want + 1})'}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"task": task_to_dict(task), "results": results}, fh, indent=1)


if __name__ == "__main__":
    main()
