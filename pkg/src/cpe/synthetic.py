"""Desk-scale experiments on a Gaussian-mixture long-tailed task.

Small enough to train a dozen configurations on a laptop CPU in a few
minutes, used by the acceptance suite and ``scripts/``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .augment import AugmentConfig
from .data import SplitSpec, build_split, gaussian_mixture
from .metrics import groupwise_f1, top1_accuracy
from .model import build_model, generate_pseudo_labels, predict
from .trainer import TrainConfig, TrainData, fit, seed_everything

VARIANTS = {
    # name: (single_expert, cbn_enabled)
    "cpe": (False, True),
    "experts_only": (False, False),
    "cbn_only": (True, True),
    "fixmatch": (True, False),
}


@dataclass
class DeskTask:
    num_classes: int = 9
    dim: int = 8
    separation: float = 3.0
    per_class: int = 3000
    test_per_class: int = 300
    corpus_seed: int = 1234
    n1: int = 600
    gamma_l: float = 50.0
    m1: dict = field(default_factory=lambda: {"consistent": 1200, "uniform": 300, "inverse": 24})
    hidden: tuple = (64, 64)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        total_steps=1500, eval_interval=0, checkpoint_interval=0,
        augment=AugmentConfig(kind="vector", weak_noise=0.1, strong_noise=0.5, strong_dropout=0.2),
    ))


def run_desk(task: DeskTask, case: str, seed: int, variant: str = "cpe") -> dict:
    corpus = gaussian_mixture(task.num_classes, task.dim, task.per_class, task.test_per_class,
                              task.separation, task.corpus_seed)
    spec = SplitSpec(task.num_classes, task.n1, task.m1[case], task.gamma_l, case, seed)
    split = build_split(corpus.y, spec)
    single, cbn = VARIANTS[variant]
    cfg = replace(task.train, seed=seed, single_expert=single, cbn_enabled=cbn)
    seed_everything(seed)
    model = build_model({"kind": "mlp", "in_dim": task.dim, "hidden": list(task.hidden)},
                        task.num_classes, cfg.num_experts)
    data = TrainData.from_split(corpus, split)
    fit(model, data, cfg)

    true_u = split.diagnostics.read()
    pseudo = generate_pseudo_labels(model, data.x_unlabeled, cfg.rho, batch_size=4096)
    report = groupwise_f1(pseudo.labels.numpy(), true_u, model.groups)
    pred = predict(model, torch.as_tensor(corpus.x_test)).numpy()
    return {
        "case": case, "seed": seed, "variant": variant,
        "top1": top1_accuracy(pred, corpus.y_test),
        "f1_overall": report.overall,
        "f1_head": report.head, "f1_medium": report.medium, "f1_tail": report.tail,
        "mask_rate": pseudo.masks.double().mean(dim=1).tolist(),
    }


def task_to_dict(task: DeskTask) -> dict:
    d = asdict(task)
    d["train"] = task.train.to_dict()
    return d
