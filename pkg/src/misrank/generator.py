"""Noise generator and adversarial-example assembly under an L-infinity budget."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


class BudgetViolation(AssertionError):
    """An emitted example left the L-infinity ball around its source image."""


def eps_unit(epsilon_byte: float) -> float:
    return float(epsilon_byte) / 255.0


def project_linf(noise: torch.Tensor, epsilon_byte: float) -> torch.Tensor:
    """Elementwise clamp to [-eps/255, eps/255]."""
    if epsilon_byte <= 0:
        raise ValueError("epsilon must be positive")
    e = eps_unit(epsilon_byte)
    return noise.clamp(-e, e)


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"), nn.InstanceNorm2d(ch, affine=True), nn.ReLU(True),
            nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect"), nn.InstanceNorm2d(ch, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


class NoiseGenerator(nn.Module):
    """Encoder-decoder: 3 stride-2 stages, residual blocks, 3 upsampling stages.

    The output is ``tanh`` scaled by eps/255, so every entry of the preliminary noise
    is within budget by construction. The last convolution starts at zero, so a fresh
    generator emits zero noise.
    """

    def __init__(self, epsilon_byte: float = 16.0, width: int = 16, n_res: int = 3):
        super().__init__()
        self.epsilon_byte = float(epsilon_byte)
        w = width
        layers = [nn.Conv2d(3, w, 7, padding=3, padding_mode="reflect"), nn.InstanceNorm2d(w, affine=True), nn.ReLU(True)]
        ch = w
        for _ in range(3):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ch * 2, affine=True), nn.ReLU(True)]
            ch *= 2
        layers += [_ResBlock(ch) for _ in range(n_res)]
        for _ in range(3):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1),
                       nn.InstanceNorm2d(ch // 2, affine=True), nn.ReLU(True)]
            ch //= 2
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv2d(ch, 3, 7, padding=3, padding_mode="reflect")
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.out(self.body(x))) * eps_unit(self.epsilon_byte)


def generate_noise(G: NoiseGenerator, image: torch.Tensor) -> torch.Tensor:
    single = image.dim() == 3
    out = G(image[None] if single else image)
    return out[0] if single else out


@dataclass
class AdversarialExample:
    original: torch.Tensor
    perturbed: torch.Tensor
    preliminary: torch.Tensor  # generator output
    masked: torch.Tensor  # mask * preliminary after projection
    mask: torch.Tensor  # binary in forward values
    epsilon_byte: float


def _broadcast_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # spatial [H, W] or [B, H, W] masks are shared across colour channels
    if mask.dim() == like.dim() - 1:
        mask = mask.unsqueeze(-3)
    elif mask.dim() == like.dim() - 2:
        mask = mask.unsqueeze(0)
    if mask.shape[-2:] != like.shape[-2:]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match image {tuple(like.shape)}")
    return mask


def compose_adversarial(image: torch.Tensor, preliminary: torch.Tensor, mask: torch.Tensor,
                        epsilon_byte: float) -> AdversarialExample:
    """perturbed = clip(image + project(mask * preliminary), 0, 1), with an exact budget.

    Gradients reach both the preliminary noise and the (straight-through) mask. The
    final float32 rounding is corrected so that |perturbed - image| <= eps/255 holds
    when evaluated in float64.
    """
    if image.shape != preliminary.shape:
        raise ValueError(f"image {tuple(image.shape)} and noise {tuple(preliminary.shape)} differ in shape")
    m = _broadcast_mask(mask, image)
    masked = project_linf(m * preliminary, epsilon_byte)
    perturbed = (image + masked).clamp(0.0, 1.0)
    with torch.no_grad():
        fixed = _enforce_budget(perturbed.detach(), image.detach(), epsilon_byte)
    # adding an exact zero keeps the corrected forward value bit-for-bit
    perturbed = fixed + (perturbed - perturbed.detach())
    return AdversarialExample(image, perturbed, preliminary, masked, m, float(epsilon_byte))


def _enforce_budget(perturbed: torch.Tensor, original: torch.Tensor, epsilon_byte: float) -> torch.Tensor:
    e = eps_unit(epsilon_byte)
    o = original.double()
    # clamp in float64, round back, then step one ulp inward wherever rounding overshot
    p = perturbed.double().clamp(o - e, o + e).to(perturbed.dtype)
    for _ in range(4):
        bad = (p.double() - o).abs() > e
        if not bad.any():
            break
        p = torch.where(bad, torch.nextafter(p, original), p)
    return p


def linf_distance(original: torch.Tensor, perturbed: torch.Tensor) -> float:
    return float((perturbed.detach().double() - original.detach().double()).abs().max()) if original.numel() else 0.0


def certify_budget(original: torch.Tensor, perturbed: torch.Tensor, epsilon_byte: float) -> float:
    """Raise :class:`BudgetViolation` unless max|perturbed - original| <= eps/255 (float64)."""
    d = linf_distance(original, perturbed)
    if d > eps_unit(epsilon_byte):
        raise BudgetViolation(f"L-inf distance {d:.9g} exceeds budget {epsilon_byte}/255 = {eps_unit(epsilon_byte):.9g}")
    return d
