"""Single-scale PatchGAN used only as a comparison fixture for the pyramid discriminator."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from misrank.discriminator import DiscriminatorOutput


class PatchGAN(nn.Module):
    def __init__(self, width: int = 32, in_channels: int = 6):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(width, width * 2, 4, 2, 1), nn.LeakyReLU(0.2, True),
            nn.Conv2d(width * 2, width * 4, 4, 2, 1), nn.LeakyReLU(0.2, True),
        )
        self.score = nn.Conv2d(width * 4, 1, 3, padding=1)
        self.response = nn.Conv2d(width * 4, 1, 1)

    def branch_parameters(self):
        yield from self.body.parameters()
        yield from self.score.parameters()

    def response_parameters(self):
        return self.response.parameters()

    def forward(self, a, b, with_lambda=True):
        if a.shape != b.shape:
            raise ValueError("pair members differ in shape")
        f = self.body(torch.cat([a, b], 1))
        lam = None
        if with_lambda:
            lam = F.interpolate(self.response(f), size=a.shape[-2:], mode="bilinear", align_corners=False)[:, 0]
        return DiscriminatorOutput([self.score(f)], lam)

