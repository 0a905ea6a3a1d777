"""Small conditional UNet with EDM-style preconditioning.

The served quantity is an estimate of the clean image:

    D(x_t, x_sp; sigma) = c_skip(sigma) * x_t
                          + c_out(sigma) * F([c_in(sigma) * x_t, x_sp], c_noise(sigma))

with the standard preconditioners

    c_skip = sd^2 / (sigma^2 + sd^2)        c_out  = sigma * sd / sqrt(sigma^2 + sd^2)
    c_in   = 1 / sqrt(sigma^2 + sd^2)       c_noise = ln(sigma) / 4

where ``sd`` is the data standard deviation measured on the training
corpus.  F is a three-scale UNet whose head is zero-initialized, so an
untrained model already returns the sensible baseline c_skip * x_t.
"""

from __future__ import annotations

import torch
from torch import nn


class _Block(nn.Module):
    """conv-norm-act with a per-channel shift from the noise embedding."""

    def __init__(self, c_in: int, c_out: int, emb: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(num_groups=min(8, c_out), num_channels=c_out)
        self.act = nn.SiLU()
        self.proj = nn.Linear(emb, c_out)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.norm(self.conv(x))
        h = h + self.proj(emb)[:, :, None, None]
        return self.act(h)


class ToyUNet(nn.Module):
    """Three-scale encoder/decoder over (noisy, condition) channel pairs."""

    def __init__(self, base_channels: int = 16, emb: int = 64):
        super().__init__()
        c = base_channels
        self.embed = nn.Sequential(nn.Linear(1, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.enc1 = _Block(2, c, emb)
        self.enc2 = _Block(c, 2 * c, emb)
        self.enc3 = _Block(2 * c, 4 * c, emb)
        self.mid = _Block(4 * c, 4 * c, emb)
        self.dec2 = _Block(4 * c + 2 * c, 2 * c, emb)
        self.dec1 = _Block(2 * c + c, c, emb)
        self.head = nn.Conv2d(c, 1, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.down = nn.AvgPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor) -> torch.Tensor:
        emb = self.embed(c_noise[:, None])
        h1 = self.enc1(x, emb)
        h2 = self.enc2(self.down(h1), emb)
        h3 = self.enc3(self.down(h2), emb)
        h = self.mid(h3, emb)
        h = self.dec2(torch.cat([self.up(h), h2], dim=1), emb)
        h = self.dec1(torch.cat([self.up(h), h1], dim=1), emb)
        return self.head(h)


class EdmDenoiser(nn.Module):
    """Preconditioning wrapper mapping (x_t, x_sp, sigma) to a clean-image estimate."""

    def __init__(self, base_channels: int = 16, sigma_data: float = 0.5):
        super().__init__()
        self.net = ToyUNet(base_channels=base_channels)
        self.register_buffer("sigma_data", torch.tensor(float(sigma_data)))

    def forward(
        self, x_t: torch.Tensor, x_sp: torch.Tensor, sigma: torch.Tensor
    ) -> torch.Tensor:
        sd = self.sigma_data
        sigma = sigma.reshape(-1, 1, 1, 1)
        c_skip = sd**2 / (sigma**2 + sd**2)
        c_out = sigma * sd / torch.sqrt(sigma**2 + sd**2)
        c_in = 1.0 / torch.sqrt(sigma**2 + sd**2)
        c_noise = torch.log(sigma.reshape(-1)) / 4.0
        f = self.net(torch.cat([c_in * x_t, x_sp], dim=1), c_noise)
        return c_skip * x_t + c_out * f
