"""Multi-condition diffusion model over subsequences of volume slices.

One model unifies three generation modes for a window of `window_len`
consecutive slices: unconditional (all slices generated), forward
(generation continues after `cond_len` known leading slices) and backward
(generation precedes `cond_len` known trailing slices). Which slots of the
window hold known content is communicated to the denoiser through per-slot
binary indicators; the window's start position, normalized by the source
depth, conditions generation on anatomical region.

Internally every example becomes a fixed-size "canvas": an m-channel stack
where condition slots carry clean encoded slices and the remaining slots
carry the noisy generation target. The denoiser predicts noise for every
slot; training and sampling only consume predictions at target slots. The
null condition used by classifier-free guidance is the same canvas with
zero-filled condition slots and all-zero indicator features.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nets import SmallUNet, sinusoidal_embedding
from .schedule import DiffusionSchedule, q_sample, reverse_step
from .volumes import LabelCodec, MaskVolume, encode_labels

POSITION_EMBED_SCALE = 1000.0


class ConditionMode(Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    UNCONDITIONAL = "unconditional"


@dataclass(frozen=True)
class ModeProbabilities:
    """Categorical distribution over the three condition modes."""

    p_forward: float
    p_backward: float
    p_uncondition: float

    def __post_init__(self):
        probs = (self.p_forward, self.p_backward, self.p_uncondition)
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ValueError(f"mode probabilities must lie in [0, 1], got {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"mode probabilities must sum to 1, got {sum(probs)!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p_forward, self.p_backward, self.p_uncondition)


DEFAULT_MODE_PROBS = ModeProbabilities(0.4, 0.4, 0.2)


def sample_condition_mode(probs: ModeProbabilities, rng: torch.Generator) -> ConditionMode:
    """Draw a condition mode with the given probabilities."""
    u = float(torch.rand((), generator=rng))
    if u < probs.p_forward:
        return ConditionMode.FORWARD
    if u < probs.p_forward + probs.p_backward:
        return ConditionMode.BACKWARD
    return ConditionMode.UNCONDITIONAL


def layout_indicators(mode: ConditionMode, window_len: int, cond_len: int) -> torch.Tensor:
    """Per-slot 0/1 indicators marking which of the m window slots hold
    condition content: the first n for forward mode (generation extends
    later slices), the last n for backward, none when unconditional."""
    if not 1 <= cond_len < window_len:
        raise ValueError(f"need 1 <= cond_len < window_len, got ({cond_len}, {window_len})")
    ind = torch.zeros(window_len)
    if mode is ConditionMode.FORWARD:
        ind[:cond_len] = 1.0
    elif mode is ConditionMode.BACKWARD:
        ind[window_len - cond_len :] = 1.0
    return ind


@dataclass
class ConditionedExample:
    """One training/sampling unit: target slices, optional condition slices,
    slot indicators, and the window's normalized start position."""

    target: torch.Tensor
    condition: torch.Tensor | None
    indicators: torch.Tensor
    rel_pos: float
    mode: ConditionMode

    def __post_init__(self):
        cond_count = 0 if self.condition is None else self.condition.shape[0]
        window_len = self.indicators.numel()
        if int(self.indicators.sum()) != cond_count:
            raise ValueError(
                f"indicators mark {int(self.indicators.sum())} slots "
                f"but condition has {cond_count} slices"
            )
        if self.target.shape[0] + cond_count != window_len:
            raise ValueError(
                f"target ({self.target.shape[0]}) + condition ({cond_count}) "
                f"slices must equal window length {window_len}"
            )
        if not 0.0 <= self.rel_pos <= 1.0:
            raise ValueError(f"relative position must lie in [0, 1], got {self.rel_pos}")

    @property
    def window_len(self) -> int:
        return self.indicators.numel()


def assemble_training_example(
    volume: torch.Tensor,
    window_len: int,
    cond_len: int,
    mode: ConditionMode,
    rng: torch.Generator,
) -> ConditionedExample:
    """Cut a random window of consecutive slices from an encoded volume and
    split it into condition/target per the mode.

    The start index is uniform on {0, ..., D - window_len}; the relative
    position is start / D.
    """
    depth = volume.shape[0]
    if not 1 <= cond_len < window_len:
        raise ValueError(f"need 1 <= cond_len < window_len, got ({cond_len}, {window_len})")
    if window_len > depth:
        raise ValueError(f"window length {window_len} exceeds volume depth {depth}")
    start = int(torch.randint(0, depth - window_len + 1, (1,), generator=rng))
    window = volume[start : start + window_len]
    indicators = layout_indicators(mode, window_len, cond_len)
    if mode is ConditionMode.FORWARD:
        condition, target = window[:cond_len], window[cond_len:]
    elif mode is ConditionMode.BACKWARD:
        condition, target = window[window_len - cond_len :], window[: window_len - cond_len]
    else:
        condition, target = None, window
    return ConditionedExample(
        target=target,
        condition=condition,
        indicators=indicators,
        rel_pos=start / depth,
        mode=mode,
    )


def scatter_window(
    target_content: torch.Tensor, condition: torch.Tensor | None, layout: torch.Tensor
) -> torch.Tensor:
    """Place target content at layout==0 slots and condition content (zeros if
    absent) at layout==1 slots, producing the full m-slot canvas."""
    cond_slots = layout.bool()
    canvas = target_content.new_zeros((layout.numel(), *target_content.shape[1:]))
    canvas[~cond_slots] = target_content
    if condition is not None:
        canvas[cond_slots] = condition.to(canvas.dtype)
    return canvas


class WindowDenoiser(nn.Module):
    """Contract for subsequence noise predictors.

    Implementations provide `forward_window` over full canvases; `predict`
    adapts it to the (noisy target, condition, indicators, position, t)
    calling convention and returns the prediction at target slots only.
    Passing condition=None with a nonzero layout requests the null-condition
    branch used by classifier-free guidance.
    """

    window_len: int
    slice_shape: tuple[int, int]

    def forward_window(
        self,
        canvas: torch.Tensor,
        indicators: torch.Tensor,
        rel_pos: torch.Tensor,
        t: torch.Tensor,
    ) -> torch.Tensor:
        raise NotImplementedError

    def predict(
        self,
        noisy_target: torch.Tensor,
        condition: torch.Tensor | None,
        layout: torch.Tensor,
        rel_pos: float,
        t: int,
    ) -> torch.Tensor:
        canvas = scatter_window(noisy_target, condition, layout)
        feature = layout if condition is not None else torch.zeros_like(layout)
        out = self.forward_window(
            canvas[None],
            feature[None].to(canvas.dtype),
            torch.tensor([rel_pos], dtype=canvas.dtype),
            torch.tensor([float(t)], dtype=canvas.dtype),
        )
        return out[0][~layout.bool()]


class SubsequenceDenoiser(WindowDenoiser):
    """Conv denoiser over the m-slot canvas with indicator channels; timestep
    and position enter as a concatenated sinusoidal embedding."""

    def __init__(
        self,
        window_len: int,
        slice_shape: tuple[int, int],
        width: int = 24,
        emb_dim: int = 64,
    ):
        super().__init__()
        if emb_dim % 4 != 0:
            raise ValueError(f"embedding dim must be divisible by 4, got {emb_dim}")
        self.window_len = int(window_len)
        self.slice_shape = (int(slice_shape[0]), int(slice_shape[1]))
        self.width = int(width)
        self.emb_dim = int(emb_dim)
        self.emb_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU())
        self.unet = SmallUNet(2 * window_len, window_len, width=width, emb_dim=emb_dim)

    def embedding(self, t: torch.Tensor, rel_pos: torch.Tensor) -> torch.Tensor:
        half = self.emb_dim // 2
        emb = torch.cat(
            [
                sinusoidal_embedding(t, half),
                sinusoidal_embedding(rel_pos * POSITION_EMBED_SCALE, half),
            ],
            dim=-1,
        )
        return self.emb_mlp(emb)

    def forward_window(self, canvas, indicators, rel_pos, t):
        maps = indicators[:, :, None, None].expand_as(canvas)
        x = torch.cat([canvas, maps], dim=1)
        return self.unet(x, self.embedding(t, rel_pos))


def cfg_combine(
    eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float
) -> torch.Tensor:
    """Classifier-free guidance: extrapolate the conditional prediction away
    from the null-condition one, eps_u + s * (eps_c - eps_u), s >= 1.

    scale == 1 returns the conditional prediction itself (the combination is
    short-circuited so the identity holds bitwise in floating point).
    """
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(
            f"prediction shapes differ: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}"
        )
    if scale < 1.0:
        raise ValueError(f"guidance scale must be >= 1, got {scale}")
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def mcdpm_loss(
    model: WindowDenoiser,
    examples: Sequence[ConditionedExample],
    ts: Sequence[int],
    noises: Sequence[torch.Tensor],
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Noise-prediction MSE over the target slots of a batch of examples.

    Deterministic given its inputs: the caller supplies the timestep and the
    noise draw for every example, so gradients can be checked against finite
    differences.
    """
    if len(examples) == 0:
        raise ValueError("empty batch")
    if not len(examples) == len(ts) == len(noises):
        raise ValueError("examples, timesteps and noises must align")
    window_len = examples[0].window_len
    shape = examples[0].target.shape[1:]
    canvases, noise_canvases, feats, rels = [], [], [], []
    for ex, t, eps in zip(examples, ts, noises):
        if ex.window_len != window_len or ex.target.shape[1:] != shape:
            raise ValueError("all examples in a batch must share window length and slice shape")
        if eps.shape != ex.target.shape:
            raise ValueError(
                f"noise shape {tuple(eps.shape)} != target shape {tuple(ex.target.shape)}"
            )
        noisy = q_sample(ex.target, int(t), eps, sched)
        canvases.append(scatter_window(noisy, ex.condition, ex.indicators))
        noise_canvases.append(scatter_window(eps, None, ex.indicators))
        feats.append(ex.indicators)
        rels.append(ex.rel_pos)
    canvas = torch.stack(canvases)
    feature = torch.stack(feats).to(canvas.dtype)
    rel = torch.tensor(rels, dtype=canvas.dtype)
    t_vec = torch.as_tensor([float(t) for t in ts], dtype=canvas.dtype)
    pred = model.forward_window(canvas, feature, rel, t_vec)
    if pred.shape != canvas.shape:
        raise ValueError(
            f"denoiser output shape {tuple(pred.shape)} != canvas shape {tuple(canvas.shape)}"
        )
    target_mask = (1.0 - feature)[:, :, None, None]
    sq_err = (pred - torch.stack(noise_canvases)) ** 2 * target_mask
    denom = target_mask.sum() * shape[0] * shape[1]
    return sq_err.sum() / denom


def mcdpm_train_step(
    model: WindowDenoiser,
    optimizer: torch.optim.Optimizer | None,
    volumes: Sequence[torch.Tensor],
    window_len: int,
    cond_len: int,
    probs: ModeProbabilities,
    sched: DiffusionSchedule,
    rng: torch.Generator,
) -> float:
    """One training step: per volume in the batch, draw a condition mode, a
    window, a timestep and a noise sample; minimize the masked noise MSE.

    Pass optimizer=None to evaluate the loss without updating parameters.
    """
    if len(volumes) == 0:
        raise ValueError("empty batch")
    if len({tuple(v.shape[1:]) for v in volumes}) != 1:
        raise ValueError("all volumes in a batch must share slice shape")
    examples = []
    for vol in volumes:
        mode = sample_condition_mode(probs, rng)
        examples.append(assemble_training_example(vol, window_len, cond_len, mode, rng))
    ts = torch.randint(1, sched.num_steps + 1, (len(examples),), generator=rng)
    noises = [
        torch.randn(ex.target.shape, generator=rng, dtype=ex.target.dtype) for ex in examples
    ]
    loss = mcdpm_loss(model, examples, [int(t) for t in ts], noises, sched)
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return float(loss.detach())


def encode_mask_volumes(masks: Sequence[MaskVolume], codec: LabelCodec) -> list[torch.Tensor]:
    return [torch.from_numpy(encode_labels(m, codec)) for m in masks]


def train_mcdpm(
    model: WindowDenoiser,
    volumes: Sequence[torch.Tensor],
    steps: int,
    batch_size: int,
    window_len: int,
    cond_len: int,
    probs: ModeProbabilities,
    sched: DiffusionSchedule,
    rng: torch.Generator,
    lr: float = 2e-3,
    optimizer: torch.optim.Optimizer | None = None,
) -> list[float]:
    """Training driver; returns the per-step loss trace. An existing optimizer
    may be passed to continue a run (used by checkpoint resume)."""
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, len(volumes), (batch_size,), generator=rng)
        batch = [volumes[int(i)] for i in idx]
        losses.append(
            mcdpm_train_step(model, optimizer, batch, window_len, cond_len, probs, sched, rng)
        )
    return losses


def sample_subsequence(
    model: WindowDenoiser,
    condition: torch.Tensor | None,
    mode: ConditionMode,
    rel_pos: float,
    window_len: int,
    cond_len: int,
    sched: DiffusionSchedule,
    guidance_scale: float,
    rng: torch.Generator,
) -> torch.Tensor:
    """Ancestral sampling of the target slices of one window.

    Unconditional mode yields all `window_len` slices; forward/backward modes
    receive `cond_len` condition slices and yield the remaining ones. When
    guidance_scale > 1 and a condition is present, each step also evaluates
    the null-condition branch and extrapolates via cfg_combine. The result is
    clamped to [-1, 1].
    """
    if not 0.0 <= rel_pos <= 1.0:
        raise ValueError(f"relative position must lie in [0, 1], got {rel_pos}")
    if guidance_scale < 1.0:
        raise ValueError(f"guidance scale must be >= 1, got {guidance_scale}")
    layout = layout_indicators(mode, window_len, cond_len)
    cond_count = 0 if condition is None else condition.shape[0]
    expected = int(layout.sum())
    if cond_count != expected:
        raise ValueError(
            f"{mode.value} mode expects {expected} condition slices, got {cond_count}"
        )
    if cond_count > 0:
        height, width = condition.shape[1:]
    else:
        height, width = model.slice_shape
    x = torch.randn((window_len - cond_count, height, width), generator=rng)
    for t in range(sched.num_steps, 0, -1):
        eps_cond = model.predict(x, condition, layout, rel_pos, t)
        if guidance_scale > 1.0 and cond_count > 0:
            eps_uncond = model.predict(x, None, layout, rel_pos, t)
            eps = cfg_combine(eps_uncond, eps_cond, guidance_scale)
        else:
            eps = eps_cond
        noise = torch.randn(x.shape, generator=rng) if t > 1 else 0.0
        x = reverse_step(x, eps, t, sched, noise)
    return x.clamp(-1.0, 1.0)
