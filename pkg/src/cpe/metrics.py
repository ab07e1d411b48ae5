"""Pseudo-label quality, accuracy and feature-statistic diagnostics.

Metric records are flat dicts keyed by ``metric``, ``expert`` and
``group`` (``None`` where not applicable) with a ``value``; the trainer
adds ``step`` when logging them.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from .model import (
    ClassGroups,
    CPEModel,
    PseudoLabelRecord,
    generate_pseudo_labels,
    predict,
    training_mode,
)

GROUP_NAMES = ("head", "medium", "tail")


def per_class_f1(pred, true, num_classes: int) -> np.ndarray:
    """F1 per class; NaN for a class that is neither predicted nor present."""
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    cm = confusion_matrix(pred, true, num_classes)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), np.nan)


def _nanmean(v) -> float:
    v = np.asarray(v, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


@dataclass
class GroupF1Report:
    head: list[float]
    medium: list[float]
    tail: list[float]
    overall: list[float]
    per_class: list[list[float]] = field(repr=False)

    def best_expert(self) -> int:
        return int(np.nanargmax(self.overall))

    def records(self) -> list[dict]:
        out = []
        for e in range(len(self.overall)):
            for g in GROUP_NAMES + ("overall",):
                out.append({"metric": "pseudo_f1", "expert": e, "group": g,
                            "value": getattr(self, g)[e]})
        return out


def groupwise_f1(pseudo_labels, true_labels, groups: ClassGroups) -> GroupF1Report:
    """Macro F1 of pseudo-labels inside each class group, per expert.

    ``pseudo_labels`` is ``[E, N]`` (or ``[N]`` for one expert), or the
    per-expert lists of ``PseudoLabelRecord`` (whose ``true_label`` is used
    when ``true_labels`` is None). Every sample counts, masked or not.
    """
    first = pseudo_labels[0] if len(pseudo_labels) else None
    if isinstance(first, list) and first and isinstance(first[0], PseudoLabelRecord):
        recs = pseudo_labels
        pseudo_labels = [[r.pseudo_label for r in rs] for rs in recs]
        if true_labels is None:
            true_labels = [r.true_label for r in recs[0]]
    pl = np.asarray(pseudo_labels, dtype=np.int64)
    if pl.ndim == 1:
        pl = pl[None]
    true = np.asarray(true_labels, dtype=np.int64)
    if pl.size == 0 or true.size == 0:
        raise ValueError("no pseudo-label records to score")
    if pl.shape[1] != true.size:
        raise ValueError("pseudo-labels and true labels differ in length")

    members = groups.members()
    per_group = {g: [] for g in GROUP_NAMES}
    overall, per_class = [], []
    for row in pl:
        f1 = per_class_f1(row, true, groups.num_classes)
        per_class.append(f1.tolist())
        overall.append(_nanmean(f1))
        for g in GROUP_NAMES:
            per_group[g].append(_nanmean(f1[list(members[g])]))
    return GroupF1Report(per_group["head"], per_group["medium"], per_group["tail"],
                         overall, per_class)


def top1_accuracy(predictions, labels) -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("no predictions")
    return float((p == y).mean())


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    p = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    return np.bincount(y * num_classes + p, minlength=num_classes**2).reshape(
        num_classes, num_classes
    )


class RunningMoments:
    """Per-channel mean / population variance, merged batch by batch (Chan et al.)."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] == 0:
            return
        nb = x.shape[0]
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        delta = mb - self.mean
        tot = self.n + nb
        self.mean = self.mean + delta * nb / tot
        self.m2 = self.m2 + m2b + delta**2 * self.n * nb / tot
        self.n = tot

    @property
    def std(self) -> np.ndarray:
        if self.n == 0:
            return np.full_like(self.mean, np.nan)
        return np.sqrt(np.maximum(self.m2 / self.n, 0.0))


@dataclass
class FeatureStats:
    """Per-channel mean/std keyed by ``(group, origin)``."""

    mean: dict[tuple[str, str], np.ndarray]
    std: dict[tuple[str, str], np.ndarray]
    count: dict[tuple[str, str], int]

    def records(self) -> list[dict]:
        return [
            {"metric": "feature_stats", "expert": None, "group": f"{g}/{o}",
             "value": {"count": self.count[(g, o)], "mean": self.mean[(g, o)].tolist(),
                       "std": self.std[(g, o)].tolist()}}
            for (g, o) in sorted(self.mean)
        ]


@torch.no_grad()
def feature_stats(model: CPEModel | None, batches: Iterable, groups: ClassGroups,
                  features_only: bool = False) -> FeatureStats:
    """Accumulate encoder-output statistics by (class group, origin).

    ``batches`` yields ``(x, labels, origin)``; with ``features_only`` the
    ``x`` are already feature vectors and ``model`` is unused.
    """
    acc: dict[tuple[str, str], RunningMoments] = {}
    group_of = np.array([groups.group_of(k) for k in range(groups.num_classes)])
    for x, labels, origin in batches:
        if features_only:
            feats = np.asarray(x, dtype=np.float64)
        else:
            x = torch.as_tensor(x)
            with training_mode(model, False):
                feats = torch.cat([model.encoder(c) for c in x.split(1024)]).double().numpy()
        g = group_of[np.asarray(labels, dtype=np.int64)]
        for name in GROUP_NAMES:
            sel = g == name
            if sel.any():
                acc.setdefault((name, origin), RunningMoments(feats.shape[1])).update(feats[sel])
    return FeatureStats({k: v.mean for k, v in acc.items()},
                        {k: v.std for k, v in acc.items()},
                        {k: v.n for k, v in acc.items()})


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation across seeds."""
    v = [float(x) for x in values]
    return statistics.fmean(v), statistics.pstdev(v)


def format_mean_std(values: Sequence[float], digits: int = 3) -> str:
    m, s = mean_std(values)
    return f"{m:.{digits}f}±{s:.{digits}f}"


def evaluation_records(model: CPEModel, x_test, y_test, x_unlabeled=None,
                       unlabeled_true=None, rho: float = 0.95, x_labeled=None,
                       y_labeled=None, with_features: bool = True) -> list[dict]:
    """Test accuracy, confusion matrix, pseudo-label F1 and mask rates, feature stats."""
    x_test = torch.as_tensor(x_test)
    pred = predict(model, x_test).numpy()
    y_test = np.asarray(y_test)
    C = model.num_classes
    cm = confusion_matrix(pred, y_test, C)
    recs = [
        {"metric": "top1", "expert": model.inference_expert, "group": None,
         "value": top1_accuracy(pred, y_test)},
        {"metric": "confusion", "expert": model.inference_expert, "group": None,
         "value": cm.tolist()},
    ]
    members = model.groups.members()
    for g in GROUP_NAMES:
        idx = list(members[g])
        rows = cm[idx]
        acc = float(np.trace(cm[np.ix_(idx, idx)]) / rows.sum()) if rows.sum() else math.nan
        recs.append({"metric": "group_accuracy", "expert": model.inference_expert,
                     "group": g, "value": acc})
    if x_unlabeled is not None:
        pseudo = generate_pseudo_labels(model, torch.as_tensor(x_unlabeled), rho, batch_size=1024)
        for e in range(model.num_experts):
            recs.append({"metric": "mask_rate", "expert": e, "group": None,
                         "value": float(pseudo.masks[e].double().mean())})
        if unlabeled_true is not None:
            recs += groupwise_f1(pseudo.labels.numpy(), unlabeled_true, model.groups).records()
            if with_features:
                batches = [(x_unlabeled, unlabeled_true, "unlabeled")]
                if x_labeled is not None:
                    batches.insert(0, (x_labeled, y_labeled, "labeled"))
                recs += feature_stats(model, batches, model.groups).records()
    return recs
