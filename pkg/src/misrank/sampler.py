"""Differentiable multi-shot pixel sampling.

The discriminator's response map is turned into per-pixel selection probabilities
with a Gumbel softmax, and the k most probable pixels form a binary attack mask.
Forward passes see the binary mask; backward passes treat the mask as the identity
map of the probabilities (straight-through).
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import torch
import torch.nn.functional as F

LAMBDA_FLOOR = 1e-6
_U_EPS = 1e-10

# Attacked-pixel proportions used in the ratio sweep.
RATIO_GRID = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8),
              Fraction(1, 16), Fraction(1, 32), Fraction(1, 64))


@dataclass
class GumbelDraw:
    noise: torch.Tensor  # -log(-log(U))
    seed: int | None = None

    @classmethod
    def sample(cls, shape, seed: int | None = None, generator: torch.Generator | None = None,
               dtype=torch.float32) -> "GumbelDraw":
        if generator is None:
            generator = torch.Generator()
            generator.manual_seed(0 if seed is None else seed)
        u = torch.rand(shape, generator=generator, dtype=dtype).clamp(_U_EPS, 1.0 - _U_EPS)
        return cls(-torch.log(-torch.log(u)), seed)

    @classmethod
    def zeros(cls, shape, dtype=torch.float32) -> "GumbelDraw":
        return cls(torch.zeros(shape, dtype=dtype))


@dataclass
class SamplingMask:
    soft: torch.Tensor  # p, sums to one over each H x W map
    hard: torch.Tensor  # forward value: binary, straight-through in backward
    k: int
    tau: float

    @property
    def binary(self) -> torch.Tensor:
        return self.hard.detach()


def positive_lambda(raw: torch.Tensor) -> torch.Tensor:
    """Map an unconstrained response map to strictly positive weights."""
    return F.softplus(raw) + LAMBDA_FLOOR


def gumbel_probs(lambda_map: torch.Tensor, tau: float, draw: GumbelDraw | torch.Tensor | None = None) -> torch.Tensor:
    """softmax((log(lambda) + g) / tau) over the trailing H x W axes.

    ``lambda_map`` must already be positive (see :func:`positive_lambda`).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not torch.isfinite(lambda_map).all():
        raise ValueError("non-finite response map passed to the sampler")
    if (lambda_map <= 0).any():
        raise ValueError("response map must be strictly positive; apply positive_lambda first")
    g = draw.noise if isinstance(draw, GumbelDraw) else draw
    logits = torch.log(lambda_map)
    if g is not None:
        logits = logits + g.to(logits.dtype)
    h, w = lambda_map.shape[-2:]
    flat = (logits / tau).reshape(*lambda_map.shape[:-2], h * w)
    return torch.softmax(flat, dim=-1).reshape(lambda_map.shape)


class _KeepTopK(torch.autograd.Function):
    @staticmethod
    def forward(ctx, p: torch.Tensor, k: int) -> torch.Tensor:
        h, w = p.shape[-2:]
        flat = p.detach().reshape(-1, h * w)
        # stable descending order -> ties resolved by (row, column)
        order = torch.argsort(-flat, dim=1, stable=True)[:, :k]
        hard = torch.zeros_like(flat).scatter_(1, order, 1.0)
        return hard.reshape(p.shape)

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def topk_mask(p: torch.Tensor, k: int, tau: float = float("nan")) -> SamplingMask:
    """Binary mask of the k largest probabilities; gradients pass straight to ``p``."""
    h, w = p.shape[-2:]
    if not 1 <= k <= h * w:
        raise ValueError(f"k must lie in [1, {h * w}], got {k}")
    return SamplingMask(soft=p, hard=_KeepTopK.apply(p, int(k)), k=int(k), tau=tau)


def ratio_to_k(ratio, height: int, width: int) -> int:
    r = Fraction(ratio).limit_denominator(1 << 16) if not isinstance(ratio, Fraction) else ratio
    if r <= 0 or r > 1:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    return max(1, round(r * height * width))


def parse_ratio(text) -> Fraction:
    """Accept '1/8', '0.125' or numbers."""
    if isinstance(text, Fraction):
        return text
    return Fraction(str(text).strip()).limit_denominator(1 << 16)


@dataclass
class TauSchedule:
    start: float = 1.0
    decay: float = 0.95
    floor: float = 0.1

    def __call__(self, epoch: int) -> float:
        return max(self.floor, self.start * self.decay ** epoch)


def sample_mask(raw_lambda: torch.Tensor, k: int, tau: float, draw: GumbelDraw | None = None) -> SamplingMask:
    """Full sampler: positivity transform, Gumbel softmax, KeepTopk.

    ``draw=None`` means zero Gumbel noise, the deterministic evaluation mode.
    """
    lam = positive_lambda(raw_lambda)
    p = gumbel_probs(lam, tau, draw)
    return topk_mask(p, k, tau)


def entropy(p: torch.Tensor) -> torch.Tensor:
    flat = p.reshape(*p.shape[:-2], -1)
    return -(flat * torch.log(flat.clamp_min(1e-300))).sum(-1)

