"""Training loop for complementary experts with classwise BN routing."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augment import AugmentConfig, strong_augment, weak_augment
from .data import Corpus, SplitResult
from .losses import LossBundle, Prior, total_cpe_loss
from .model import CPEModel, generate_pseudo_labels, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STEP_LOG = "steps.jsonl"
METRICS_LOG = "metrics.jsonl"
LAST_CHECKPOINT = "checkpoints/last.pt"


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int):
        self.term = term
        self.step = step
        super().__init__(f"non-finite loss in {term} at step {step}")


@dataclass
class TrainConfig:
    labeled_batch: int = 64
    unlabeled_batch: int = 128
    lam: float = 2.0
    rho: float = 0.95
    learning_rate: float = 3e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    taus: tuple[float, ...] = (0.0, 2.0, 4.0)
    total_steps: int = 1000
    cbn_enabled: bool = True
    single_expert: bool = False
    eval_interval: int = 500
    checkpoint_interval: int = 1000
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.taus = tuple(float(t) for t in self.taus)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if not 0 < self.rho <= 1:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")
        if len(self.taus) != 3:
            raise ValueError("taus must hold three intensities")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ValueError("batch sizes must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    @property
    def num_experts(self) -> int:
        return 1 if self.single_expert else 3

    @property
    def active_taus(self) -> tuple[float, ...]:
        return self.taus[: self.num_experts]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepReport:
    step: int
    losses: LossBundle
    mask_rates: list[float]
    learning_rate: float

    def to_dict(self) -> dict:
        return {"step": self.step, "losses": self.losses.to_dict(),
                "mask_rates": self.mask_rates, "learning_rate": self.learning_rate}


@dataclass
class TrainData:
    """Everything the trainer may see: no ground truth for unlabeled samples."""

    x_labeled: torch.Tensor
    y_labeled: torch.Tensor
    x_unlabeled: torch.Tensor
    labeled_counts: np.ndarray
    num_classes: int

    @classmethod
    def from_split(cls, corpus: Corpus, split: SplitResult) -> "TrainData":
        return cls(
            x_labeled=torch.as_tensor(corpus.x[split.labeled_ids]),
            y_labeled=torch.as_tensor(split.labeled_labels),
            x_unlabeled=torch.as_tensor(corpus.x[split.unlabeled_ids]),
            labeled_counts=np.asarray(split.labeled_counts),
            num_classes=split.spec.num_classes,
        )

    def prior(self, dtype=torch.float32) -> Prior:
        return Prior.from_counts(self.labeled_counts, dtype=dtype)


def _stream_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


class BatchSchedule:
    """Batch indices as a pure function of (seed, step).

    The labeled stream is reshuffled every pass over the labeled set; the
    unlabeled stream cycles on its own permutation schedule.
    """

    def __init__(self, seed: int, n_labeled: int, n_unlabeled: int, b_l: int, b_u: int):
        self.seed, self.sizes, self.batches = seed, (n_labeled, n_unlabeled), (b_l, b_u)
        self._perms: dict[tuple[int, int], torch.Tensor] = {}

    def _perm(self, stream: int, epoch: int) -> torch.Tensor:
        key = (stream, epoch)
        if key not in self._perms:
            if len(self._perms) > 64:
                self._perms.clear()
            g = torch.Generator().manual_seed(_stream_seed(self.seed, stream, epoch))
            self._perms[key] = torch.randperm(self.sizes[stream], generator=g)
        return self._perms[key]

    def _indices(self, stream: int, step: int) -> torch.Tensor:
        n, b = self.sizes[stream], self.batches[stream]
        pos = step * b + np.arange(b)
        return torch.stack([self._perm(stream, int(p // n))[int(p % n)] for p in pos])

    def labeled(self, step: int) -> torch.Tensor:
        return self._indices(0, step)

    def unlabeled(self, step: int) -> torch.Tensor:
        return self._indices(1, step)

    def epoch(self, step: int) -> int:
        return step * self.batches[0] // self.sizes[0]

    def augment_generator(self, step: int) -> torch.Generator:
        return torch.Generator().manual_seed(_stream_seed(self.seed, 2, step))


def make_optimizer(model: CPEModel, cfg: TrainConfig) -> torch.optim.SGD:
    """SGD with weight decay on weight matrices/kernels only (no BN, no biases)."""
    decay, no_decay = [], []
    bn_params = set()
    for m in model.modules():
        if isinstance(m, torch.nn.modules.batchnorm._BatchNorm):
            bn_params.update(id(p) for p in m.parameters(recurse=False))
    for name, p in model.named_parameters():
        if id(p) in bn_params or name.endswith(".bias"):
            no_decay.append(p)
        else:
            decay.append(p)
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": cfg.weight_decay, "name": "decay"},
         {"params": no_decay, "weight_decay": 0.0, "name": "no_decay"}],
        lr=cfg.learning_rate, momentum=cfg.momentum,
    )


def _routes(pseudo, groups, b_l: int):
    """Rows of the unlabeled batch that feed BN_MT / BN_T batch statistics.

    A row is routed when some expert's confident pseudo-label activates it.
    """
    keep = pseudo.masks
    mt = (keep & groups.in_medium_or_tail(pseudo.labels)).any(dim=0)
    t = (keep & groups.in_tail(pseudo.labels)).any(dim=0)
    return {"MT": mt, "T": t}


def compute_step_loss(model: CPEModel, x_lw, y_l, x_uw, x_us, prior: Prior, cfg: TrainConfig):
    """Pseudo-label the weak view, then one shared encoder pass over labeled + strong."""
    pseudo = generate_pseudo_labels(model, x_uw, cfg.rho)
    b_l = x_lw.shape[0]
    model.train()
    z = model.features(torch.cat([x_lw, x_us]))
    hmt = model.branch_logits(z, True, branches=("HMT",))[0]
    if cfg.cbn_enabled:
        other = model.branch_logits(z[b_l:], True, _routes(pseudo, model.groups, b_l),
                                    branches=("MT", "T"))
        unlabeled = torch.cat([hmt[None, :, b_l:], other])
        groups = model.groups
    else:
        unlabeled = hmt[:, b_l:]
        groups = None
    loss, bundle = total_cpe_loss(
        hmt[:, :b_l], y_l, unlabeled, pseudo.labels, pseudo.confidences,
        prior, cfg.active_taus, cfg.rho, cfg.lam, groups,
    )
    return loss, bundle, pseudo


def _check_finite(bundle: LossBundle, step: int):
    for name in ("supervised_per_expert", "unsupervised_per_expert"):
        for i, v in enumerate(getattr(bundle, name)):
            if not math.isfinite(v):
                raise NonFiniteLossError(f"{name.split('_')[0]} loss of expert {i + 1}", step)


def train_step(model: CPEModel, optimizer, labeled, unlabeled, cfg: TrainConfig,
               prior: Prior, gen: torch.Generator, step: int = 0) -> StepReport:
    x_l, y_l = labeled
    dtype = next(model.parameters()).dtype
    x_l, unlabeled = x_l.to(dtype), unlabeled.to(dtype)
    x_lw = weak_augment(x_l, gen, cfg.augment)
    x_uw = weak_augment(unlabeled, gen, cfg.augment)
    x_us = strong_augment(unlabeled, gen, cfg.augment)
    loss, bundle, _ = compute_step_loss(model, x_lw, y_l, x_uw, x_us, prior, cfg)
    _check_finite(bundle, step)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return StepReport(step, bundle, list(bundle.mask_rate_per_expert),
                      optimizer.param_groups[0]["lr"])


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _append_jsonl(path: Path, record: dict):
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _truncate_jsonl(path: Path, max_step: int):
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= max_step]
    path.write_text("".join(ln + "\n" for ln in keep))


Evaluator = Callable[[CPEModel, int], list[dict]]


def fit(model: CPEModel, data: TrainData, cfg: TrainConfig, run_dir: str | Path | None = None,
        evaluate: Evaluator | None = None, resume: bool = True,
        stop_after: int | None = None) -> tuple[CPEModel, list[StepReport]]:
    """Run ``cfg.total_steps`` training steps.

    With ``run_dir`` the step log, metric records and checkpoints are
    written there, and an existing ``last.pt`` is resumed from.
    ``evaluate(model, step)`` returns metric records; it runs every
    ``eval_interval`` steps and once at the end. ``stop_after`` halts early
    (without the final evaluation) to simulate an interruption.
    """
    if model.num_experts != cfg.num_experts:
        raise ValueError("model and config disagree on the number of experts")
    dtype = next(model.parameters()).dtype
    prior = data.prior(dtype)
    optimizer = make_optimizer(model, cfg)
    sched = BatchSchedule(cfg.seed, len(data.y_labeled), len(data.x_unlabeled),
                          cfg.labeled_batch, cfg.unlabeled_batch)
    reports: list[StepReport] = []
    start = 0
    last_eval = -1

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt = run_dir / LAST_CHECKPOINT
        if resume and ckpt.exists():
            saved, payload = load_checkpoint(ckpt)
            model.load_state_dict(saved.state_dict())
            optimizer.load_state_dict(payload["optimizer_state"])
            torch.set_rng_state(payload["torch_rng"])
            start = payload["step"]
            last_eval = payload.get("last_eval", -1)
            log.info("resuming %s from step %d", run_dir, start)
        _truncate_jsonl(run_dir / STEP_LOG, start - 1)
        _truncate_jsonl(run_dir / METRICS_LOG, start)

    def run_eval(step):
        nonlocal last_eval
        if evaluate is None or last_eval == step:
            return
        records = evaluate(model, step)
        last_eval = step
        if run_dir is not None:
            for r in records:
                _append_jsonl(run_dir / METRICS_LOG, {"step": step, **r})

    def checkpoint(step):
        if run_dir is not None:
            save_checkpoint(run_dir / LAST_CHECKPOINT, model, step=step,
                            optimizer_state=optimizer.state_dict(),
                            torch_rng=torch.get_rng_state(), train_config=cfg.to_dict(),
                            last_eval=last_eval)

    for step in range(start, cfg.total_steps):
        if stop_after is not None and step >= stop_after:
            checkpoint(step)
            return model, reports
        li, ui = sched.labeled(step), sched.unlabeled(step)
        report = train_step(model, optimizer, (data.x_labeled[li], data.y_labeled[li]),
                            data.x_unlabeled[ui], cfg, prior, sched.augment_generator(step), step)
        reports.append(report)
        if run_dir is not None:
            _append_jsonl(run_dir / STEP_LOG, report.to_dict())
        done = step + 1
        if cfg.eval_interval > 0 and done % cfg.eval_interval == 0 and done < cfg.total_steps:
            run_eval(done)
        if cfg.checkpoint_interval > 0 and done % cfg.checkpoint_interval == 0:
            checkpoint(done)

    run_eval(cfg.total_steps)
    checkpoint(cfg.total_steps)
    return model, reports
