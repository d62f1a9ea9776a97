"""Multi-stage pyramid discriminator.

Three fully convolutional branches see the (channel-concatenated) image pair at
full, half and quarter resolution. Each has five 4x4 convolutions, three of them
stride 2, and ends in a real/fake score map. Same-size branch features are merged
into stages at 1/32, 1/16, 1/8 and 1/4 of the input, fused top-down (bilinear x2,
1x1 reduction, add, 3x3 conv), and a head of two dilated convolutions plus a 1x1
convolution emits the response map lambda at input resolution.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .losses import gan_discriminator_loss


def _trunc_normal_(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.trunc_normal_(m.weight, mean=0.0, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class _Branch(nn.Module):
    """conv s2, conv s2, conv s2, conv s1, conv s1 -> score map.

    ``widths`` gives the channels of the three downsampling convolutions and of the
    first stride-1 convolution. Returns the score map and the features after each
    stride-2 convolution.
    """

    def __init__(self, in_ch: int, widths: tuple[int, int, int, int]):
        super().__init__()
        c1, c2, c3, c4 = widths
        act = lambda: nn.LeakyReLU(0.2, inplace=True)  # noqa: E731
        self.down = nn.ModuleList([
            nn.Sequential(spectral_norm(nn.Conv2d(in_ch, c1, 4, 2, 1)), act()),
            nn.Sequential(spectral_norm(nn.Conv2d(c1, c2, 4, 2, 1)), act()),
            nn.Sequential(spectral_norm(nn.Conv2d(c2, c3, 4, 2, 1)), act()),
        ])
        # 4x4 stride-1 convs keep the size with (1, 2) padding per axis
        self.conv4 = nn.Sequential(nn.ZeroPad2d((1, 2, 1, 2)), spectral_norm(nn.Conv2d(c3, c4, 4, 1)), act())
        self.score = nn.Sequential(nn.ZeroPad2d((1, 2, 1, 2)), spectral_norm(nn.Conv2d(c4, 1, 4, 1)))

    def forward(self, x):
        feats = []
        for layer in self.down:
            x = layer(x)
            feats.append(x)
        return self.score(self.conv4(x)), feats


@dataclass
class DiscriminatorOutput:
    stage_scores: list[torch.Tensor]  # one score map per branch
    lambda_map: torch.Tensor  # [B, H, W], unconstrained
    stage_shapes: dict | None = None


class PyramidDiscriminator(nn.Module):
    STRIDES = (32, 16, 8, 4)

    def __init__(self, widths: tuple[int, ...] = (32, 64, 128, 256), fusion_width: int = 64, in_channels: int = 6):
        super().__init__()
        widths = tuple(int(v) for v in widths)
        if len(widths) == 3:
            widths = widths + (widths[-1],)
        if len(widths) != 4 or min(widths) < 1:
            raise ValueError(f"widths needs four positive channel counts, got {widths}")
        self.branches = nn.ModuleList([_Branch(in_channels, widths) for _ in range(3)])
        # Branch b (input downscaled by 2**b) yields features at strides 2**(b+1..b+3).
        self.stage_sources = {s: [] for s in self.STRIDES}
        for b in range(3):
            for level in range(3):
                stride = 2 ** (b + level + 1)
                if stride in self.stage_sources:
                    self.stage_sources[stride].append((b, level))
        self.merge = nn.ModuleDict({
            str(s): nn.Conv2d(sum(widths[l] for _, l in src), fusion_width, 1)
            for s, src in self.stage_sources.items()
        })
        self.lateral = nn.ModuleDict({str(s): nn.Conv2d(fusion_width, fusion_width, 1) for s in self.STRIDES[1:]})
        self.smooth = nn.ModuleDict({
            str(s): nn.Sequential(nn.Conv2d(fusion_width, fusion_width, 3, padding=1), nn.LeakyReLU(0.2, inplace=True))
            for s in self.STRIDES[1:]
        })
        self.head = nn.Sequential(
            nn.Conv2d(fusion_width, fusion_width, 3, padding=2, dilation=2), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(fusion_width, fusion_width, 3, padding=4, dilation=4), nn.LeakyReLU(0.2, inplace=True),
            nn.Conv2d(fusion_width, 1, 1),
        )
        for part in (self.merge, self.lateral, self.smooth, self.head):
            _trunc_normal_(part)

    def branch_parameters(self):
        return self.branches.parameters()

    def response_parameters(self):
        """Parameters of the fusion pyramid and head (the lambda path only)."""
        for part in (self.merge, self.lateral, self.smooth, self.head):
            yield from part.parameters()

    def forward(self, a: torch.Tensor, b: torch.Tensor, with_lambda: bool = True) -> DiscriminatorOutput:
        if a.shape != b.shape:
            raise ValueError(f"pair members differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
        h, w = a.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} is not divisible by 32")
        x = torch.cat([a, b], dim=1)
        scores, feats = [], []
        for i, branch in enumerate(self.branches):
            xi = x if i == 0 else F.interpolate(x, scale_factor=0.5 ** i, mode="bilinear", align_corners=False,
                                                antialias=True)
            s, f = branch(xi)
            scores.append(s)
            feats.append(f)
        if not with_lambda:
            return DiscriminatorOutput(scores, None)

        stage = {s: self.merge[str(s)](torch.cat([feats[b][l] for b, l in src], 1))
                 for s, src in self.stage_sources.items()}
        shapes = {s: tuple(t.shape[-2:]) for s, t in stage.items()}
        fused = stage[32]
        for s in self.STRIDES[1:]:
            up = F.interpolate(fused, size=stage[s].shape[-2:], mode="bilinear", align_corners=False)
            fused = self.smooth[str(s)](self.lateral[str(s)](up) + stage[s])
        lam = self.head(fused)
        lam = F.interpolate(lam, size=(h, w), mode="bilinear", align_corners=False)[:, 0]
        return DiscriminatorOutput(scores, lam, shapes)


def discriminate(D: nn.Module, pair: tuple[torch.Tensor, torch.Tensor]) -> DiscriminatorOutput:
    a, b = pair
    single = a.dim() == 3
    if single:
        a, b = a[None], b[None]
    return D(a, b)


def discriminator_step(D: nn.Module, optimizer: torch.optim.Optimizer | None,
                       real_pair: tuple[torch.Tensor, torch.Tensor],
                       fake_pair: tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """One least-squares update of the branch score maps. Returns the loss (pre-update)."""
    n = len(real_pair[0])
    out = D(torch.cat([real_pair[0], fake_pair[0]]), torch.cat([real_pair[1], fake_pair[1]]), with_lambda=False)
    real = [s[:n] for s in out.stage_scores]
    fake = [s[n:] for s in out.stage_scores]
    loss = gan_discriminator_loss(real, fake)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"discriminator loss is {loss.item()}")
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return loss.detach()


def sample_real_pairs(images: torch.Tensor, ids: torch.Tensor, generator: torch.Generator | None = None):
    """For each anchor: (random different-ID image, random same-ID image) from the batch."""
    n = len(ids)
    same = ids[:, None] == ids[None, :]
    eye = torch.eye(n, dtype=torch.bool)
    u = torch.rand(n, n, generator=generator)
    cd = u.masked_fill(same, -1.0).argmax(1)
    cs = u.masked_fill(~same | eye, -1.0).argmax(1)
    return images[cd], images[cs]
