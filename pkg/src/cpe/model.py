"""Shared encoder, classwise BN branches and expert heads."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

BRANCHES = ("HMT", "MT", "T")
CHECKPOINT_FORMAT = "cpe-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ClassGroups:
    """Head/medium/tail partition of ``range(num_classes)`` by labeled frequency."""

    head: tuple[int, ...]
    medium: tuple[int, ...]
    tail: tuple[int, ...]

    @property
    def num_classes(self) -> int:
        return len(self.head) + len(self.medium) + len(self.tail)

    def group_of(self, k: int) -> str:
        if k in self.head:
            return "head"
        if k in self.medium:
            return "medium"
        if k in self.tail:
            return "tail"
        raise ValueError(f"class {k} outside [0, {self.num_classes})")

    def in_tail(self, y: torch.Tensor) -> torch.Tensor:
        return y >= self.num_classes - len(self.tail)

    def in_medium_or_tail(self, y: torch.Tensor) -> torch.Tensor:
        return y >= len(self.head)

    def members(self) -> dict[str, tuple[int, ...]]:
        return {"head": self.head, "medium": self.medium, "tail": self.tail}


def partition_classes(num_classes: int) -> ClassGroups:
    if num_classes < 3:
        raise ValueError(f"need at least 3 classes to form groups, got {num_classes}")
    third = num_classes // 3
    return ClassGroups(
        head=tuple(range(third)),
        medium=tuple(range(third, num_classes - third)),
        tail=tuple(range(num_classes - third, num_classes)),
    )


# ---------------------------------------------------------------------------
# encoders


class MLPEncoder(nn.Module):
    def __init__(self, in_dim: int, hidden: Sequence[int] = (64, 64)):
        super().__init__()
        layers, d = [], in_dim
        for h in hidden:
            layers += [nn.Linear(d, h), nn.ReLU()]
            d = h
        self.net = nn.Sequential(*layers)
        self.out_dim = d

    def forward(self, x):
        return self.net(x.flatten(1))


class _WideBlock(nn.Module):
    def __init__(self, cin, cout, stride, bn_momentum):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin, momentum=bn_momentum)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout, momentum=bn_momentum)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.shortcut = None
        if cin != cout or stride != 1:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, 0, bias=False)

    def forward(self, x):
        o = F.leaky_relu(self.bn1(x), 0.1)
        y = self.conv1(o)
        y = self.conv2(F.leaky_relu(self.bn2(y), 0.1))
        return y + (x if self.shortcut is None else self.shortcut(o))


class WideResNet(nn.Module):
    """WRN-d-k feature extractor for 32x32 inputs; output is the pooled feature."""

    def __init__(self, depth: int = 28, widen: int = 2, in_channels: int = 3,
                 bn_momentum: float = 0.001):
        super().__init__()
        if (depth - 4) % 6:
            raise ValueError("WRN depth must be 6n + 4")
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        self.conv = nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False)
        blocks = []
        for stage, stride in zip(range(3), (1, 2, 2)):
            for b in range(n):
                blocks.append(
                    _WideBlock(widths[stage] if b == 0 else widths[stage + 1],
                               widths[stage + 1], stride if b == 0 else 1, bn_momentum)
                )
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(widths[3], momentum=bn_momentum)
        self.out_dim = widths[3]
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="leaky_relu")

    def forward(self, x):
        x = self.blocks(self.conv(x))
        x = F.leaky_relu(self.bn(x), 0.1)
        return F.adaptive_avg_pool2d(x, 1).flatten(1)


def build_encoder(cfg: dict) -> nn.Module:
    kind = cfg.get("kind", "mlp")
    if kind == "mlp":
        return MLPEncoder(cfg["in_dim"], tuple(cfg.get("hidden", (64, 64))))
    if kind == "wrn":
        return WideResNet(cfg.get("depth", 28), cfg.get("widen", 2), cfg.get("in_channels", 3))
    raise ValueError(f"unknown encoder kind {kind!r}")


# ---------------------------------------------------------------------------
# classwise batch norm


class BranchNorm(nn.BatchNorm1d):
    """BatchNorm1d whose statistic update is decided per call."""

    def normalize(self, x: torch.Tensor, batch_stats: bool) -> torch.Tensor:
        if self.running_mean is None:
            raise RuntimeError("branch has no running statistics")
        if batch_stats:
            self.num_batches_tracked += 1
        return F.batch_norm(
            x, self.running_mean, self.running_var, self.weight, self.bias,
            training=batch_stats, momentum=self.momentum, eps=self.eps,
        )


class CPEModel(nn.Module):
    """Encoder -> {BN_HMT, BN_MT, BN_T} -> expert heads.

    With one expert the model is the single-head control; with three the
    second expert is the inference head.
    """

    def __init__(self, encoder: nn.Module, num_classes: int, num_experts: int = 3,
                 bn_momentum: float = 0.1, config: dict | None = None):
        super().__init__()
        if num_experts not in (1, 3):
            raise ValueError("num_experts must be 1 or 3")
        self.encoder = encoder
        self.num_classes = num_classes
        self.num_experts = num_experts
        self.feature_dim = encoder.out_dim
        self.groups = partition_classes(num_classes)
        self.bn = nn.ModuleDict(
            {b: BranchNorm(self.feature_dim, momentum=bn_momentum) for b in BRANCHES}
        )
        self.experts = nn.ModuleList(
            nn.Linear(self.feature_dim, num_classes) for _ in range(num_experts)
        )
        self.config = dict(config or {})
        self.encoded_samples = 0

    @property
    def inference_expert(self) -> int:
        return 1 if self.num_experts == 3 else 0

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self.encoded_samples += x.shape[0]
        return self.encoder(x)

    def heads(self, h: torch.Tensor) -> torch.Tensor:
        return torch.stack([e(h) for e in self.experts])

    def _branch(self, name, z, route, train):
        bn = self.bn[name]
        if not train:
            return bn.normalize(z, batch_stats=False)
        if route is None:
            route = torch.ones(z.shape[0], dtype=torch.bool, device=z.device)
        idx_in = torch.nonzero(route).squeeze(1)
        if idx_in.numel() < 2:
            # batch statistics of <2 rows are degenerate; fall back to running stats
            return bn.normalize(z, batch_stats=False)
        if idx_in.numel() == z.shape[0]:
            return bn.normalize(z, batch_stats=True)
        idx_out = torch.nonzero(~route).squeeze(1)
        out = z.new_zeros(z.shape)
        out = out.index_copy(0, idx_in, bn.normalize(z[idx_in], batch_stats=True))
        return out.index_copy(0, idx_out, bn.normalize(z[idx_out], batch_stats=False))

    def branch_logits(self, z: torch.Tensor, train: bool,
                      routes: dict[str, torch.Tensor] | None = None,
                      branches: Sequence[str] = BRANCHES) -> torch.Tensor:
        """Logits ``[len(branches), E, B, C]`` for encoder features ``z``.

        In training, a branch computes batch statistics (and updates its
        running statistics) only over the rows its route selects; the other
        rows are normalised with running statistics. Missing routes mean
        every row.
        """
        routes = routes or {}
        return torch.stack(
            [self.heads(self._branch(b, z, routes.get(b), train)) for b in branches]
        )

    def forward(self, x):
        return forward_branches(self, x, "eval", branches=("HMT",))[0]


@contextlib.contextmanager
def training_mode(model: nn.Module, train: bool) -> Iterator[None]:
    prev = model.training
    model.train(train)
    try:
        yield
    finally:
        model.train(prev)


def forward_branches(model: CPEModel, x: torch.Tensor, mode: str = "train",
                     routes: dict[str, torch.Tensor] | None = None,
                     branches: Sequence[str] = BRANCHES) -> torch.Tensor:
    """One encoder pass, then every requested branch and expert: ``[3, E, B, C]``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    with training_mode(model, train):
        return model.branch_logits(model.features(x), train, routes, branches)


@dataclass
class PseudoLabelRecord:
    sample_id: int
    expert: int
    pseudo_label: int
    confidence: float
    passed_mask: bool
    true_label: int | None = None


@dataclass
class PseudoLabels:
    """Per-expert pseudo-labels for one unlabeled batch, tensors shaped ``[E, B]``."""

    labels: torch.Tensor
    confidences: torch.Tensor
    masks: torch.Tensor

    def records(self, sample_ids=None, true_labels=None) -> list[list[PseudoLabelRecord]]:
        num_experts, batch = self.labels.shape
        ids = list(range(batch)) if sample_ids is None else [int(i) for i in sample_ids]
        out = []
        for e in range(num_experts):
            out.append([
                PseudoLabelRecord(
                    sample_id=ids[j], expert=e, pseudo_label=int(self.labels[e, j]),
                    confidence=float(self.confidences[e, j]),
                    passed_mask=bool(self.masks[e, j]),
                    true_label=None if true_labels is None else int(true_labels[j]),
                )
                for j in range(batch)
            ])
        return out


@torch.no_grad()
def generate_pseudo_labels(model: CPEModel, weak_views: torch.Tensor, rho: float,
                           batch_size: int | None = None) -> PseudoLabels:
    """Argmax and max-softmax of each expert over BN_HMT with running statistics.

    Touches neither parameters nor any running statistic.
    """
    chunks = [weak_views] if batch_size is None else torch.split(weak_views, batch_size)
    logits = torch.cat(
        [forward_branches(model, c, "eval", branches=("HMT",))[0] for c in chunks], dim=1
    )
    conf, labels = torch.softmax(logits, dim=-1).max(dim=-1)
    return PseudoLabels(labels, conf, conf > rho)


@torch.no_grad()
def predict(model: CPEModel, inputs: torch.Tensor, batch_size: int = 1024) -> torch.Tensor:
    """Class predictions of the inference expert over BN_HMT."""
    e = model.inference_expert
    with training_mode(model, False):
        out = []
        for chunk in torch.split(inputs, batch_size):
            h = model.bn["HMT"].normalize(model.features(chunk), batch_stats=False)
            out.append(model.experts[e](h).argmax(dim=-1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def build_model(encoder_cfg: dict, num_classes: int, num_experts: int = 3,
                bn_momentum: float = 0.1) -> CPEModel:
    cfg = {"encoder": dict(encoder_cfg), "num_classes": num_classes,
           "num_experts": num_experts, "bn_momentum": bn_momentum}
    return CPEModel(build_encoder(encoder_cfg), num_classes, num_experts, bn_momentum, cfg)


def save_checkpoint(path: str | Path, model: CPEModel, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": model.config,
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "groups": {k: list(v) for k, v in model.groups.members().items()},
        "model_state": model.state_dict(),
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[CPEModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a CPE checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = payload["model_config"]
    model = build_model(cfg["encoder"], cfg["num_classes"], cfg["num_experts"],
                        cfg.get("bn_momentum", 0.1))
    model = model.to(getattr(torch, payload.get("dtype", "float32")))
    model.load_state_dict(payload["model_state"])
    return model, payload
