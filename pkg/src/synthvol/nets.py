"""Small convolutional backbones shared by the denoisers and the slice generator."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(values: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of a (B,) tensor of scalars into (B, dim)."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=values.dtype) / max(half - 1, 1)
    )
    args = values[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def init_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Re-draw all weights from an explicit generator so model creation is
    reproducible regardless of global RNG state."""
    for _, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if param.ndim >= 2:
                fan_in = param.shape[1] * (param[0, 0].numel() if param.ndim > 2 else 1)
                bound = 1.0 / math.sqrt(fan_in)
                param.uniform_(-bound, bound, generator=generator)
            else:
                param.zero_()
    # norms keep affine identity
    for mod in module.modules():
        if isinstance(mod, nn.GroupNorm):
            with torch.no_grad():
                mod.weight.fill_(1.0)
                mod.bias.zero_()


class _Block(nn.Module):
    """conv -> (+ embedding bias) -> groupnorm -> silu"""

    def __init__(self, channels: int, emb_dim: int = 0):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.emb_proj = nn.Linear(emb_dim, channels) if emb_dim > 0 else None

    def forward(self, x, emb=None):
        h = self.conv(x)
        if self.emb_proj is not None:
            h = h + self.emb_proj(emb)[:, :, None, None]
        return F.silu(self.norm(h))


class SmallUNet(nn.Module):
    """Two-level encoder-decoder over channel-stacked slices.

    One downsampling by 2, additive skip connection, optional conditioning
    through an embedding vector injected as per-channel biases.
    """

    def __init__(self, in_channels: int, out_channels: int, width: int = 16, emb_dim: int = 0):
        super().__init__()
        self.emb_dim = emb_dim
        self.stem = nn.Conv2d(in_channels, width, 3, padding=1)
        self.enc = _Block(width, emb_dim)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.mid = _Block(2 * width, emb_dim)
        self.up = nn.Conv2d(2 * width, width, 3, padding=1)
        self.dec = _Block(width, emb_dim)
        self.head = nn.Conv2d(width, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor | None = None) -> torch.Tensor:
        h0 = F.silu(self.stem(x))
        h0 = self.enc(h0, emb)
        h1 = F.silu(self.down(h0))
        h1 = self.mid(h1, emb)
        h1 = F.interpolate(h1, size=h0.shape[-2:], mode="nearest")
        h1 = F.silu(self.up(h1))
        h = self.dec(h1 + h0, emb)
        return self.head(h)
