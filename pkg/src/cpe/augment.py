"""Weak and strong views for consistency training.

Every call takes an explicit ``torch.Generator`` so a view is a pure
function of (sample, generator state). Vector data gets Gaussian noise
(and feature dropout for the strong view); images in ``[0, 1]`` get
flip/translate (weak) or flip/translate plus random photometric ops and
cutout (strong).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AugmentConfig:
    kind: str = "vector"  # "vector" | "image" | "identity"
    weak_noise: float = 0.1
    strong_noise: float = 0.5
    strong_dropout: float = 0.2
    max_shift: int = 4
    num_ops: int = 2
    cutout: float = 0.5  # fraction of the side length


def _uniform(shape, gen, device=None):
    return torch.rand(shape, generator=gen, device=device)


def _flip_shift(x, gen, max_shift):
    n, _, h, w = x.shape
    flip = _uniform(n, gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    if max_shift <= 0:
        return x
    padded = F.pad(x, (max_shift,) * 4, mode="reflect")
    dx = torch.randint(0, 2 * max_shift + 1, (n,), generator=gen)
    dy = torch.randint(0, 2 * max_shift + 1, (n,), generator=gen)
    return torch.stack(
        [padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w] for i in range(n)]
    )


def _brightness(x, m):
    return (x * (1 + m)).clamp(0, 1)


def _contrast(x, m):
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return ((x - mean) * (1 + m) + mean).clamp(0, 1)


def _solarize(x, m):
    thresh = 1 - m.abs()
    return torch.where(x >= thresh, 1 - x, x)


def _posterize(x, m):
    bits = (8 - (m.abs() * 4).round()).clamp(4, 8)
    levels = 2 ** bits
    return torch.floor(x * (levels - 1) + 0.5) / (levels - 1)


def _invert(x, m):
    return 1 - x


def _color_drop(x, m):
    gray = x.mean(dim=1, keepdim=True).expand_as(x)
    return gray + (x - gray) * (1 - m.abs())


_OPS = (_brightness, _contrast, _solarize, _posterize, _invert, _color_drop)


def _cutout(x, gen, frac):
    n, _, h, w = x.shape
    size = max(1, int(round(frac * min(h, w))))
    cy = torch.randint(0, h, (n,), generator=gen)
    cx = torch.randint(0, w, (n,), generator=gen)
    ys = torch.arange(h)[None, :, None]
    xs = torch.arange(w)[None, None, :]
    box = ((ys - cy[:, None, None]).abs() <= size // 2) & ((xs - cx[:, None, None]).abs() <= size // 2)
    return torch.where(box[:, None], torch.full_like(x, 0.5), x)


def weak_augment(x: torch.Tensor, gen: torch.Generator, cfg: AugmentConfig = AugmentConfig()):
    if cfg.kind == "identity":
        return x
    if cfg.kind == "vector":
        if cfg.weak_noise == 0:
            return x
        return x + cfg.weak_noise * torch.randn(x.shape, generator=gen, dtype=x.dtype)
    return _flip_shift(x, gen, cfg.max_shift)


def strong_augment(x: torch.Tensor, gen: torch.Generator, cfg: AugmentConfig = AugmentConfig()):
    if cfg.kind == "identity":
        return x
    if cfg.kind == "vector":
        out = x
        if cfg.strong_noise:
            out = out + cfg.strong_noise * torch.randn(x.shape, generator=gen, dtype=x.dtype)
        if cfg.strong_dropout:
            keep = _uniform(x.shape, gen) >= cfg.strong_dropout
            out = out * keep
        return out
    out = _flip_shift(x, gen, cfg.max_shift)
    n = out.shape[0]
    for _ in range(cfg.num_ops):
        op = torch.randint(0, len(_OPS), (n,), generator=gen)
        mag = (_uniform(n, gen) * 2 - 1)[:, None, None, None] * 0.9
        mixed = torch.stack([f(out, mag) for f in _OPS])
        out = mixed[op, torch.arange(n)]
    if cfg.cutout > 0:
        out = _cutout(out, gen, cfg.cutout)
    return out
