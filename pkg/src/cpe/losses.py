"""Loss terms of complementary-expert training.

Every function takes logits shaped ``[..., C]`` and returns per-sample
values (or batch reductions) as differentiable torch tensors. Non-tensor
inputs are promoted to float64.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .model import ClassGroups

BRANCHES = ("HMT", "MT", "T")


def _as_logits(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _as_labels(y, num_classes: int) -> torch.Tensor:
    y = torch.as_tensor(y, dtype=torch.long)
    if y.numel() and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return y


@dataclass(frozen=True)
class Prior:
    """Label-frequency prior of the labeled set."""

    pi: torch.Tensor
    log_pi: torch.Tensor

    @classmethod
    def from_counts(cls, counts: Sequence[int], dtype=torch.float64) -> "Prior":
        counts = torch.as_tensor(np.array(counts), dtype=dtype)
        if torch.any(counts <= 0):
            raise ValueError("prior counts must be positive (log of zero)")
        pi = counts / counts.sum()
        return cls(pi, torch.log(pi))

    @classmethod
    def from_probs(cls, pi, dtype=torch.float64) -> "Prior":
        pi = torch.as_tensor(np.array(pi), dtype=dtype)
        if torch.any(pi <= 0):
            raise ValueError("prior entries must be positive (log of zero)")
        if not torch.isclose(pi.sum(), torch.ones((), dtype=dtype), atol=1e-6):
            raise ValueError("prior must sum to 1")
        return cls(pi, torch.log(pi))

    @classmethod
    def uniform(cls, num_classes: int, dtype=torch.float64) -> "Prior":
        return cls.from_counts([1] * num_classes, dtype=dtype)

    def to(self, dtype) -> "Prior":
        return Prior(self.pi.to(dtype), self.log_pi.to(dtype))

    @property
    def num_classes(self) -> int:
        return self.pi.numel()

    @property
    def is_uniform(self) -> bool:
        return bool((self.log_pi == self.log_pi[0]).all())


@dataclass(frozen=True)
class TauTriple:
    tau1: float = 0.0
    tau2: float = 2.0
    tau3: float = 4.0

    def __post_init__(self):
        if min(self) < 0:
            raise ValueError("logit-adjustment intensities must be nonnegative")

    def __iter__(self):
        return iter((self.tau1, self.tau2, self.tau3))

    def __getitem__(self, i):
        return tuple(self)[i]


@dataclass
class LossBundle:
    supervised_per_expert: list[float]
    unsupervised_per_expert: list[float]
    mask_rate_per_expert: list[float]
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(logits, labels) -> torch.Tensor:
    """Per-sample ``-log softmax(logits)[label]`` via max-shifted log-sum-exp."""
    logits = _as_logits(logits)
    labels = _as_labels(labels, logits.shape[-1])
    shift = logits.max(dim=-1, keepdim=True).values.detach()
    z = logits - shift
    lse = torch.log(torch.exp(z).sum(dim=-1))
    picked = torch.gather(z, -1, labels.unsqueeze(-1)).squeeze(-1)
    return lse - picked


def balanced_cross_entropy(logits, labels, prior: Prior, tau: float) -> torch.Tensor:
    logits = _as_logits(logits)
    if prior.num_classes != logits.shape[-1]:
        raise ValueError("prior and logits disagree on the number of classes")
    # a constant offset cannot change the loss; skip it so the result is bit-identical
    if tau == 0 or prior.is_uniform:
        return cross_entropy(logits, labels)
    return cross_entropy(logits + tau * prior.log_pi.to(logits.dtype), labels)


def softmax_confidence(logits) -> tuple[torch.Tensor, torch.Tensor]:
    """(argmax class, max softmax probability) along the last axis."""
    probs = torch.softmax(_as_logits(logits), dim=-1)
    conf, label = probs.max(dim=-1)
    return label, conf


def confidence_mask(probabilities, rho: float) -> torch.Tensor:
    """Strict ``max p > rho``; a tie at exactly ``rho`` is masked out."""
    p = _as_logits(probabilities)
    return p.max(dim=-1).values > rho


def _check_experts(expert_logits) -> torch.Tensor:
    if isinstance(expert_logits, torch.Tensor):
        return expert_logits
    shapes = {tuple(e.shape) for e in expert_logits}
    if len(shapes) != 1:
        raise ValueError(f"expert logits disagree in shape: {sorted(shapes)}")
    return torch.stack([_as_logits(e) for e in expert_logits])


def supervised_cpe_loss(expert_logits, labels, prior: Prior, taus: Sequence[float]):
    """Sum over experts of the batch-mean logit-adjusted CE.

    ``expert_logits`` is ``[E, B, C]`` (or a list of ``[B, C]``); ``taus``
    holds one intensity per expert. Returns ``(total, per_expert)``.
    """
    logits = _check_experts(expert_logits)
    taus = list(taus)
    if len(taus) != logits.shape[0]:
        raise ValueError(f"{logits.shape[0]} experts but {len(taus)} taus")
    per_expert = torch.stack(
        [balanced_cross_entropy(logits[i], labels, prior, t).mean() for i, t in enumerate(taus)]
    )
    return per_expert.sum(), per_expert


def cbn_weights(pseudo_labels, groups: ClassGroups, dtype=torch.float64) -> torch.Tensor:
    """``[3, ...]`` branch indicators over (HMT, MT, T), divided by the active count."""
    y = _as_labels(pseudo_labels, groups.num_classes)
    active = torch.stack(
        [
            torch.ones_like(y, dtype=torch.bool),
            groups.in_medium_or_tail(y),
            groups.in_tail(y),
        ]
    )
    active = active.to(dtype)
    return active / active.sum(dim=0)


def active_branch_count(pseudo_labels, groups: ClassGroups) -> torch.Tensor:
    y = _as_labels(pseudo_labels, groups.num_classes)
    return 1 + groups.in_medium_or_tail(y).long() + groups.in_tail(y).long()


def cbn_unsupervised_term(branch_logits, pseudo_labels, groups: ClassGroups) -> torch.Tensor:
    """Pseudo-label CE averaged over the BN branches the pseudo-label activates.

    ``branch_logits`` is a mapping ``{"HMT", "MT", "T"} -> [..., C]`` or a
    stacked ``[3, ..., C]`` tensor in that order. Inactive branches are
    selected away, never multiplied in, so their values cannot leak.
    """
    if isinstance(branch_logits, dict):
        branch_logits = torch.stack([_as_logits(branch_logits[b]) for b in BRANCHES])
    y = _as_labels(pseudo_labels, groups.num_classes)
    weights = cbn_weights(y, groups, branch_logits.dtype)
    total = weights[0] * cross_entropy(branch_logits[0], y)
    for b in (1, 2):
        ce = cross_entropy(branch_logits[b], y)
        total = total + torch.where(weights[b] > 0, weights[b] * ce, torch.zeros_like(ce))
    return total


def unsupervised_cpe_loss(
    expert_logits,
    pseudo_labels,
    confidences,
    rho: float,
    lam: float,
    groups: ClassGroups | None = None,
):
    """Masked pseudo-label CE summed over experts.

    Without ``groups`` the logits are ``[E, B, C]`` and plain CE is used.
    With ``groups`` they are ``[3 branches, E, B, C]`` and each sample's CE
    is replaced by the branch-averaged term. Each expert uses its own
    pseudo-labels and confidences (both ``[E, B]``). The normaliser is the
    full batch size, masked samples included.

    Returns ``(total, per_expert, mask_rates)``.
    """
    if groups is None:
        logits = _check_experts(expert_logits)
        num_experts, batch = logits.shape[0], logits.shape[1]
    else:
        logits = expert_logits
        num_experts, batch = logits.shape[1], logits.shape[2]
    pseudo_labels = torch.as_tensor(pseudo_labels)
    confidences = torch.as_tensor(confidences)
    if tuple(pseudo_labels.shape) != (num_experts, batch) or tuple(confidences.shape) != (
        num_experts,
        batch,
    ):
        raise ValueError("pseudo-labels/confidences must be [experts, batch]")
    masks = confidences > rho

    per_expert, rates = [], []
    for i in range(num_experts):
        if groups is None:
            ce = cross_entropy(logits[i], pseudo_labels[i])
        else:
            ce = cbn_unsupervised_term(logits[:, i], pseudo_labels[i], groups)
        kept = torch.where(masks[i], ce, torch.zeros_like(ce))
        per_expert.append(lam * kept.sum() / batch)
        rates.append(masks[i].double().mean() if batch else torch.zeros((), dtype=torch.float64))
    per_expert = torch.stack(per_expert)
    return per_expert.sum(), per_expert, torch.stack(rates)


def total_cpe_loss(
    labeled_logits,
    labels,
    unlabeled_logits,
    pseudo_labels,
    confidences,
    prior: Prior,
    taus: Sequence[float],
    rho: float,
    lam: float,
    groups: ClassGroups | None = None,
) -> tuple[torch.Tensor, LossBundle]:
    """Supervised plus unsupervised loss for one step.

    ``unlabeled_logits`` is ``[E, B_u, C]`` when ``groups`` is None and
    ``[3, E, B_u, C]`` (branch-major) when the classwise branches are on.
    """
    sup, sup_each = supervised_cpe_loss(labeled_logits, labels, prior, taus)
    unsup, unsup_each, rates = unsupervised_cpe_loss(
        unlabeled_logits, pseudo_labels, confidences, rho, lam, groups
    )
    total = sup + unsup
    bundle = LossBundle(
        supervised_per_expert=sup_each.detach().tolist(),
        unsupervised_per_expert=unsup_each.detach().tolist(),
        mask_rate_per_expert=rates.tolist(),
        total=float(total.detach()),
    )
    return total, bundle
