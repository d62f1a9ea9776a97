"""Attack objectives.

* mis-ranking: inverted triplet on the easiest pairs
* misclassification toward the least-likely class, smoothed over non-GT identities
* MS-SSIM perception term
* least-squares GAN terms for the multi-stage discriminator
* the weighted total
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

# Wang et al. 2003 per-scale weights for five scales
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class LossWeights:
    zeta: float = 2.0  # mis-ranking weight
    eta: float = 5.0  # perception weight
    delta: float = 0.1  # label smoothing of the misclassification target
    margin: float = 0.3
    msssim_levels: int | None = None  # None: as many scales as the 11x11 window allows (max 5)
    msssim_exponents: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("zeta", "eta", "delta", "margin"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.zeta < 0 or self.eta < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.msssim_exponents is not None and self.msssim_levels is not None \
                and len(self.msssim_exponents) != self.msssim_levels:
            raise ValueError("need one MS-SSIM exponent per level")


# ---------------------------------------------------------------------------
# ranking / classification


def _check_pk(ids: torch.Tensor) -> None:
    uniq, counts = torch.unique(ids, return_counts=True)
    if len(uniq) < 2 or (counts < 2).any():
        raise ValueError("mis-ranking loss needs >= 2 identities with >= 2 samples each")


def misrank_loss(embeddings: torch.Tensor, ids: torch.Tensor, margin: float = 0.3,
                 reference: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over anchors of [max inter-ID d^2 - min intra-ID d^2 + margin]_+.

    Distances are squared L2. Pair members come from ``reference`` when given (e.g.
    clean-image embeddings), otherwise from ``embeddings`` itself. The anchor's own
    index is never used as its intra-ID partner.
    """
    _check_pk(ids)
    other = embeddings if reference is None else reference
    diff = embeddings[:, None, :] - other[None, :, :]
    d = diff.pow(2).sum(-1)
    same = ids[:, None] == ids[None, :]
    self_mask = torch.eye(len(ids), dtype=torch.bool, device=ids.device)
    far_inter = d.masked_fill(same, float("-inf")).amax(1)
    near_intra = d.masked_fill(~same | self_mask, float("inf")).amin(1)
    return F.relu(far_inter - near_intra + margin).sum()


def misclass_target(clean_logits: torch.Tensor, gt_ids: torch.Tensor, delta: float) -> torch.Tensor:
    """(1 - delta) * onehot(argmin clean logits) + delta * v, v uniform over non-GT ids."""
    b, k = clean_logits.shape
    if k < 2:
        raise ValueError("misclassification loss needs at least 2 identities")
    least = clean_logits.argmin(1)
    onehot = F.one_hot(least, k).to(clean_logits.dtype)
    v = torch.full_like(onehot, 1.0 / (k - 1))
    v.scatter_(1, gt_ids.view(-1, 1), 0.0)
    return (1.0 - delta) * onehot + delta * v


def misclass_loss(logprobs: torch.Tensor, clean_logits: torch.Tensor, gt_ids: torch.Tensor,
                  delta: float = 0.1) -> torch.Tensor:
    """Cross-entropy of adversarial log-probabilities against the smoothed least-likely target."""
    target = misclass_target(clean_logits.detach(), gt_ids, delta)
    return -(logprobs * target).sum(1).mean()


# ---------------------------------------------------------------------------
# MS-SSIM


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g.to(dtype)


def max_msssim_levels(height: int, width: int, window: int = SSIM_WINDOW) -> int:
    levels = 0
    while levels < len(MSSSIM_WEIGHTS) and min(height, width) / 2 ** levels >= window:
        levels += 1
    return levels


def msssim_exponents(levels: int) -> tuple[float, ...]:
    """The standard five-scale weights truncated to ``levels`` and renormalized."""
    w = MSSSIM_WEIGHTS[:levels]
    s = sum(w)
    return tuple(v / s for v in w)


def _filter(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    c = x.shape[1]
    wx = win.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    wy = win.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    return F.conv2d(F.conv2d(x, wx, groups=c), wy, groups=c)


def _ssim_terms(x, y, win, c1, c2):
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x ** 2
    syy = _filter(y * y, win) - mu_y ** 2
    sxy = _filter(x * y, win) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    # contrast * structure with C3 = C2 / 2 collapses to this single ratio
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return lum, cs


def msssim(img1: torch.Tensor, img2: torch.Tensor, levels: int | None = None,
           exponents: tuple[float, ...] | None = None, data_range: float = 1.0,
           reduction: str = "mean") -> torch.Tensor:
    """Multi-scale SSIM for [B, C, H, W] (or [C, H, W]) images in [0, data_range].

    Luminance enters only at the coarsest scale; contrast-structure at every scale.
    Per-scale terms are spatial means, combined per channel and then averaged over
    channels. ``reduction='none'`` keeps the batch axis.
    """
    if img1.shape != img2.shape:
        raise ValueError(f"shape mismatch {tuple(img1.shape)} vs {tuple(img2.shape)}")
    if img1.dim() == 3:
        img1, img2 = img1[None], img2[None]
    h, w = img1.shape[-2:]
    if levels is None:
        levels = max_msssim_levels(h, w)
        if levels == 0:
            raise ValueError(f"{h}x{w} images are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if min(h, w) / 2 ** (levels - 1) < SSIM_WINDOW:
        raise ValueError(
            f"{levels} MS-SSIM levels shrink {h}x{w} below the {SSIM_WINDOW}px window; "
            f"use levels <= {max_msssim_levels(h, w)}")
    exps = exponents if exponents is not None else msssim_exponents(levels)
    if len(exps) != levels:
        raise ValueError("need one exponent per level")
    win = gaussian_window(dtype=img1.dtype)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2

    x, y = img1, img2
    value = None
    for j in range(levels):
        lum, cs = _ssim_terms(x, y, win, c1, c2)
        if j == levels - 1:
            term = (lum * cs).mean((2, 3))
        else:
            term = cs.mean((2, 3))
        term = F.relu(term) ** exps[j]
        value = term if value is None else value * term
        if j < levels - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    per_image = value.mean(1)
    return per_image.mean() if reduction == "mean" else per_image


# ---------------------------------------------------------------------------
# GAN terms (least-squares form)


def gan_discriminator_loss(real_scores: list[torch.Tensor], fake_scores: list[torch.Tensor]) -> torch.Tensor:
    """Sum over branches of 0.5 * (mean (real - 1)^2 + mean fake^2)."""
    total = 0.0
    for r, f in zip(real_scores, fake_scores, strict=True):
        total = total + 0.5 * ((r - 1).pow(2).mean() + f.pow(2).mean())
    return total


def gan_generator_loss(fake_scores: list[torch.Tensor]) -> torch.Tensor:
    """Sum over branches of 0.5 * mean (fake - 1)^2."""
    total = 0.0
    for f in fake_scores:
        total = total + 0.5 * (f - 1).pow(2).mean()
    return total


# ---------------------------------------------------------------------------
# total objective


@dataclass
class LossParts:
    gan: torch.Tensor | float = 0.0
    xent: torch.Tensor | float = 0.0
    etri: torch.Tensor | float = 0.0
    msssim: torch.Tensor | float = 1.0
    extra: dict = field(default_factory=dict)


def total_loss(parts: LossParts, weights: LossWeights) -> torch.Tensor:
    """gan + xent + zeta * etri + eta * (1 - msssim)."""
    for name in ("gan", "xent", "etri", "msssim"):
        v = getattr(parts, name)
        val = v.detach() if isinstance(v, torch.Tensor) else torch.tensor(float(v))
        if not torch.isfinite(val).all():
            raise NonFiniteLoss(f"loss component '{name}' is not finite ({val})")
    return parts.gan + parts.xent + weights.zeta * parts.etri + weights.eta * (1.0 - parts.msssim)
