"""Sequential mask-conditioned image synthesis.

A single conv net maps (current mask slice, previous mask slice, previous
image slice) to the current image slice. Sweeping it along the depth axis
turns a mask volume into an image volume: the first slice sees zeroed
previous channels, later slices receive the previously generated image
slice, which keeps adjacent slices consistent. Training samples random
slice triples from paired volumes with the true previous image slice as
input (teacher forcing) and minimizes mean absolute reconstruction error.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .nets import SmallUNet
from .volumes import ImageVolume, LabelCodec, MaskVolume, encode_labels


class SliceSequenceGenerator(nn.Module):
    """Conditional slice generator; input channels: mask_t, mask_{t-1}, image_{t-1}."""

    def __init__(self, slice_shape: tuple[int, int], width: int = 16):
        super().__init__()
        self.slice_shape = (int(slice_shape[0]), int(slice_shape[1]))
        self.width = int(width)
        self.net = SmallUNet(3, 1, width=width, emb_dim=0)

    def forward(
        self, mask_now: torch.Tensor, mask_prev: torch.Tensor, image_prev: torch.Tensor
    ) -> torch.Tensor:
        x = torch.stack([mask_now, mask_prev, image_prev], dim=1)
        return self.net(x)[:, 0]


def _slice_triples(
    pairs_encoded: list[tuple[torch.Tensor, torch.Tensor]],
    picks: torch.Tensor,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    mask_now, mask_prev, img_prev, img_now = [], [], [], []
    for vol_idx, slice_idx in picks.tolist():
        mask, image = pairs_encoded[vol_idx]
        mask_now.append(mask[slice_idx])
        img_now.append(image[slice_idx])
        if slice_idx == 0:
            mask_prev.append(torch.zeros_like(mask[0]))
            img_prev.append(torch.zeros_like(image[0]))
        else:
            mask_prev.append(mask[slice_idx - 1])
            img_prev.append(image[slice_idx - 1])
    return (
        torch.stack(mask_now),
        torch.stack(mask_prev),
        torch.stack(img_prev),
        torch.stack(img_now),
    )


def train_seq_generator(
    pairs: Sequence[tuple[MaskVolume, ImageVolume]],
    codec: LabelCodec,
    epochs: int,
    rng: torch.Generator,
    width: int = 16,
    batch_size: int = 16,
    lr: float = 2e-3,
    model: SliceSequenceGenerator | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> tuple[SliceSequenceGenerator, list[float]]:
    """Train the slice generator on random slice triples; one epoch visits
    every (volume, slice) pair once in random order. Returns (model, losses).
    """
    if len(pairs) == 0:
        raise ValueError("need at least one training pair")
    for mask, image in pairs:
        if mask.shape != image.shape:
            raise ValueError(f"pair shapes differ: {mask.shape} vs {image.shape}")
    pairs_encoded = [
        (torch.from_numpy(encode_labels(mask, codec)), torch.from_numpy(image.voxels))
        for mask, image in pairs
    ]
    index = torch.tensor(
        [(v, s) for v, (mask, _) in enumerate(pairs_encoded) for s in range(mask.shape[0])]
    )
    if model is None:
        model = SliceSequenceGenerator(slice_shape=pairs[0][0].shape[1:], width=width)
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    for _ in range(epochs):
        order = torch.randperm(index.shape[0], generator=rng)
        for chunk in order.split(batch_size):
            mask_now, mask_prev, img_prev, img_now = _slice_triples(pairs_encoded, index[chunk])
            pred = model(mask_now, mask_prev, img_prev)
            loss = torch.mean(torch.abs(pred - img_now))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
    return model, losses


def generate_image_volume(
    mask: MaskVolume, model: SliceSequenceGenerator, codec: LabelCodec
) -> ImageVolume:
    """Sweep the generator along the depth axis; slice 0 is generated with
    zeroed previous channels, the rest autoregressively. Output is clamped
    to [-1, 1]."""
    encoded = torch.from_numpy(encode_labels(mask, codec))
    depth = encoded.shape[0]
    out = torch.empty_like(encoded)
    zero = torch.zeros_like(encoded[0])
    with torch.no_grad():
        for d in range(depth):
            mask_prev = encoded[d - 1] if d > 0 else zero
            img_prev = out[d - 1] if d > 0 else zero
            pred = model(encoded[d][None], mask_prev[None], img_prev[None])[0]
            out[d] = pred.clamp(-1.0, 1.0)
    return ImageVolume(out.numpy())
