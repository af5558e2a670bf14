"""Semantic diffusion refinement of generated image volumes.

One semantic diffusion model (SDM) per slicing axis learns standard noise
prediction on 2-D slices with the encoded mask slice as an extra input
channel. Refinement re-noises the whole volume by a small number of forward
steps k, then runs k mask-conditioned reverse steps slicewise along each of
the three axes independently; the result is the voxelwise mean of the three
refined volumes, clamped to [-1, 1].

The three view branches draw from independent generators derived from the
call seed and the axis identity, never from a shared sequential stream, so
the output is invariant to the order in which views are processed. The mean
is accumulated in float64 over the canonical view order, which makes k=0
refinement an exact identity.
"""

from __future__ import annotations

from enum import Enum
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .nets import SmallUNet, sinusoidal_embedding
from .schedule import DiffusionSchedule, q_sample, reverse_step
from .seeding import child_seed, torch_generator
from .volumes import ImageVolume, LabelCodec, MaskVolume, encode_labels


class View(Enum):
    """Slicing axis of a D x H x W volume."""

    AXIAL = 0
    CORONAL = 1
    SAGITTAL = 2


ALL_VIEWS = (View.AXIAL, View.CORONAL, View.SAGITTAL)


class SliceDenoiser(nn.Module):
    """Per-view SDM: predicts the noise in an image slice given the slice and
    its encoded mask."""

    def __init__(self, slice_shape: tuple[int, int], width: int = 16, emb_dim: int = 32):
        super().__init__()
        self.slice_shape = (int(slice_shape[0]), int(slice_shape[1]))
        self.width = int(width)
        self.emb_dim = int(emb_dim)
        self.emb_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU())
        self.unet = SmallUNet(2, 1, width=width, emb_dim=emb_dim)

    def forward(
        self, noisy: torch.Tensor, mask_slice: torch.Tensor, t: torch.Tensor
    ) -> torch.Tensor:
        emb = self.emb_mlp(sinusoidal_embedding(t.to(noisy.dtype), self.emb_dim))
        x = torch.stack([noisy, mask_slice], dim=1)
        return self.unet(x, emb)[:, 0]


def _view_slices(volume: torch.Tensor, view: View) -> torch.Tensor:
    return volume.movedim(view.value, 0)


def train_sdm(
    view: View,
    pairs: Sequence[tuple[MaskVolume, ImageVolume]],
    codec: LabelCodec,
    sched: DiffusionSchedule,
    epochs: int,
    rng: torch.Generator,
    width: int = 16,
    batch_size: int = 16,
    lr: float = 2e-3,
    model: SliceDenoiser | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> tuple[SliceDenoiser, list[float]]:
    """Train one view's SDM with the standard noise-prediction objective on
    that view's slices. Returns (model, per-step losses)."""
    if len(pairs) == 0:
        raise ValueError("need at least one training pair")
    for mask, image in pairs:
        if mask.shape != image.shape:
            raise ValueError(f"pair shapes differ: {mask.shape} vs {image.shape}")
    mask_slices = torch.cat(
        [
            _view_slices(torch.from_numpy(encode_labels(mask, codec)), view)
            for mask, _ in pairs
        ]
    )
    image_slices = torch.cat(
        [_view_slices(torch.from_numpy(image.voxels), view) for _, image in pairs]
    )
    if model is None:
        model = SliceDenoiser(slice_shape=tuple(image_slices.shape[1:]), width=width)
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    total = image_slices.shape[0]
    for _ in range(epochs):
        order = torch.randperm(total, generator=rng)
        for chunk in order.split(batch_size):
            x0 = image_slices[chunk]
            cond = mask_slices[chunk]
            ts = torch.randint(1, sched.num_steps + 1, (x0.shape[0],), generator=rng)
            eps = torch.randn(x0.shape, generator=rng)
            noisy = q_sample(x0, ts, eps, sched)
            pred = model(noisy, cond, ts)
            loss = torch.mean((pred - eps) ** 2)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
    return model, losses


def renoise(
    image: ImageVolume, k: int, sched: DiffusionSchedule, rng: torch.Generator
) -> ImageVolume:
    """Apply k forward diffusion steps in closed form (identity for k=0)."""
    if not 0 <= k <= sched.num_steps:
        raise ValueError(f"renoise steps must lie in [0, {sched.num_steps}], got {k}")
    if k == 0:
        return ImageVolume(image.voxels.copy())
    x0 = torch.from_numpy(image.voxels)
    eps = torch.randn(x0.shape, generator=rng)
    return ImageVolume(q_sample(x0, k, eps, sched).numpy())


def _refine_view(
    voxels: torch.Tensor,
    mask_encoded: torch.Tensor,
    model: SliceDenoiser,
    view: View,
    k: int,
    sched: DiffusionSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    if k == 0:
        return voxels.clone()
    eps = torch.randn(voxels.shape, generator=rng)
    x = q_sample(voxels, k, eps, sched)
    slices = _view_slices(x, view)
    mask_slices = _view_slices(mask_encoded, view)
    t_vec = torch.empty(slices.shape[0])
    with torch.no_grad():
        for t in range(k, 0, -1):
            pred = model(slices, mask_slices, t_vec.fill_(float(t)))
            noise = torch.randn(slices.shape, generator=rng) if t > 1 else 0.0
            slices = reverse_step(slices, pred, t, sched, noise)
    return slices.movedim(0, view.value)


def refine_volume(
    image: ImageVolume,
    mask: MaskVolume,
    models: Mapping[View, SliceDenoiser],
    k: int,
    sched: DiffusionSchedule,
    codec: LabelCodec,
    seed: int,
    view_order: Sequence[View] = ALL_VIEWS,
) -> ImageVolume:
    """Refine an image volume with the three per-view SDMs.

    Each view independently re-noises the volume by k steps and denoises it
    slicewise conditioned on the mask; the output is the mean of the three
    branches. `view_order` only changes scheduling, never the result.
    """
    if not 0 <= k <= sched.num_steps:
        raise ValueError(f"refinement steps must lie in [0, {sched.num_steps}], got {k}")
    if set(view_order) != set(ALL_VIEWS):
        raise ValueError(f"view order must cover all three views, got {list(view_order)}")
    missing = [v for v in ALL_VIEWS if v not in models]
    if missing:
        raise ValueError(f"missing SDM for views {[v.name for v in missing]}")
    if image.shape != mask.shape:
        raise ValueError(f"image shape {image.shape} != mask shape {mask.shape}")

    voxels = torch.from_numpy(image.voxels)
    mask_encoded = torch.from_numpy(encode_labels(mask, codec))
    refined: dict[View, torch.Tensor] = {}
    for view in view_order:
        gen = torch_generator(child_seed(seed, "refine", view.value))
        refined[view] = _refine_view(voxels, mask_encoded, models[view], view, k, sched, gen)
    total = np.zeros(image.shape, dtype=np.float64)
    for view in ALL_VIEWS:  # canonical accumulation order, independent of view_order
        total += refined[view].numpy().astype(np.float64)
    mean = np.clip(total / 3.0, -1.0, 1.0).astype(np.float32)
    return ImageVolume(mean)
