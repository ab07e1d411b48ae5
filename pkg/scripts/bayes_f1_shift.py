"""Macro-F1 of Bayes-posterior pseudo-labels under a shifted log-prior.

Labels are ``argmax_k log p(x|k) + a * log pi_k`` with the true mixture
likelihood and the labeled long-tail prior ``pi``. Prints, for each
unlabeled case, the F1-optimal ``a`` and the F1 at the three expert
shifts ``a = 1 + c - k * tau`` for a calibration offset ``c`` and an
effectiveness ``k`` of the logit adjustment.

    python3 scripts/bayes_f1_shift.py --dim 8 --separation 3 --gamma 50
"""

import argparse

import numpy as np

from cpe.data import longtail_counts
from cpe.metrics import per_class_f1

CASES = {"consistent": 1.0, "uniform": 0.0, "inverse": -1.0}


def f1_curves(dim, sep, gamma, num_classes=9, n=200_000, seed=0, grid=np.arange(-4, 4.01, 0.25)):
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    means *= sep / np.linalg.norm(means, axis=1, keepdims=True)
    counts = longtail_counts(1000, gamma, num_classes)
    log_pi = np.log(counts / counts.sum())
    curves = {}
    for case, power in CASES.items():
        p = np.exp(power * log_pi)
        p /= p.sum()
        y = rng.choice(num_classes, n, p=p)
        x = means[y] + rng.standard_normal((n, dim))
        ll = x @ means.T - 0.5 * (means**2).sum(1)
        curves[case] = np.array([np.nanmean(per_class_f1((ll + a * log_pi).argmax(1), y, num_classes))
                                 for a in grid])
    return grid, curves


def pattern_offsets(grid, curves, k, taus=(0, 2, 4)):
    """Offsets ``c`` at which each expert wins exactly its own case."""
    hits = []
    for c in np.arange(-3, 3.001, 0.05):
        wins = [int(np.argmax([np.interp(1 + c - k * t, grid, curves[case]) for t in taus]))
                for case in CASES]
        if wins == [0, 1, 2]:
            hits.append(round(float(c), 2))
    return hits


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--gamma", type=float, default=50.0)
    args = p.parse_args()
    grid, curves = f1_curves(args.dim, args.separation, args.gamma)
    for case, f1 in curves.items():
        print(f"{case:10s} F1-optimal a = {grid[int(np.argmax(f1))]:+.2f}  (max F1 {f1.max():.3f})")
    for k in (0.25, 0.5, 0.75, 1.0):
        hits = pattern_offsets(grid, curves, k)
        span = f"c in [{min(hits)}, {max(hits)}]" if hits else "no offset"
        print(f"adjustment effectiveness k={k:.2f}: matching pattern for {span}")


if __name__ == "__main__":
    main()
