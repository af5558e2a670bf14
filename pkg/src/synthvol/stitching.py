"""Autoregressive assembly of a full-length mask volume from subsequences.

Generation starts from one unconditionally sampled window of `window_len`
slices at a random valid start position, then grows the sequence in both
directions: forward steps condition on the last `cond_len` generated slices
and append `window_len - cond_len` new ones; backward steps mirror this at
the front. Each sampled block receives the normalized start position of its
window (clamped to 0 when a backward window would begin before the volume).

Because the block size need not divide the remaining span, the loops may
overshoot the requested length at either end; full blocks are generated and
the excess is trimmed from the outer ends only, so the seed block and every
slice that served as a condition survive untouched. The number of valid
start positions equals L - (window_len - 1); drawing the start from those
positions keeps the seed window inside the volume. Stitching operates
entirely in encoded continuous space; labels are decoded once, after
assembly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import torch

from .mcdpm import (
    ConditionMode,
    DEFAULT_MODE_PROBS,
    ModeProbabilities,
    WindowDenoiser,
    sample_subsequence,
)
from .schedule import DiffusionSchedule
from .volumes import LabelCodec, MaskVolume, decode_labels


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs of stitched mask generation: target length L, window length m,
    condition count n, guidance scale, training mode mixture (provenance) and
    the seed."""

    length: int
    window_len: int = 6
    cond_len: int = 1
    guidance_scale: float = 1.0
    probs: ModeProbabilities = DEFAULT_MODE_PROBS
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.cond_len < self.window_len <= self.length:
            raise ValueError(
                f"need 1 <= cond_len < window_len <= length, got "
                f"({self.cond_len}, {self.window_len}, {self.length})"
            )
        if self.guidance_scale < 1.0:
            raise ValueError(f"guidance scale must be >= 1, got {self.guidance_scale}")

    @property
    def start_position_count(self) -> int:
        """Number of valid start positions for the seed window, L - (m - 1)."""
        return self.length - (self.window_len - 1)

    @property
    def block_step(self) -> int:
        return self.window_len - self.cond_len

    @property
    def max_expansions(self) -> int:
        """Termination bound on forward+backward iterations, 2 * ceil(L / (m - n))."""
        return 2 * math.ceil(self.length / self.block_step)


@dataclass(frozen=True)
class BlockRecord:
    """Provenance of one sampled block: its mode, the normalized position fed
    to the sampler, and the absolute indices of the generated slices (which
    may fall outside [0, L) before trimming)."""

    mode: ConditionMode
    rel_pos: float
    first_index: int
    count: int


class BlockSampler(Protocol):
    def __call__(
        self, condition: torch.Tensor | None, mode: ConditionMode, rel_pos: float
    ) -> torch.Tensor: ...


def stitch_sequence(
    sample_block: BlockSampler,
    cfg: GenerationConfig,
    rng: torch.Generator,
) -> tuple[torch.Tensor, list[BlockRecord]]:
    """Run the stitched generation loop with an arbitrary block sampler.

    Returns the assembled (L, H, W) tensor and the per-block provenance
    records. The sampler must return `window_len` slices for the
    unconditional seed and `window_len - cond_len` slices otherwise.
    """
    length, m, n = cfg.length, cfg.window_len, cfg.cond_len
    step = cfg.block_step

    start = int(torch.randint(0, cfg.start_position_count, (1,), generator=rng))
    slices = sample_block(None, ConditionMode.UNCONDITIONAL, start / length)
    if slices.shape[0] != m:
        raise ValueError(f"seed block must have {m} slices, got {slices.shape[0]}")
    records = [BlockRecord(ConditionMode.UNCONDITIONAL, start / length, start, m)]
    lo, hi = start, start + m  # absolute span currently covered: [lo, hi)

    iterations = 0
    while hi < length:
        condition = slices[-n:]
        rel = (hi - n) / length
        block = sample_block(condition, ConditionMode.FORWARD, rel)
        if block.shape[0] != step:
            raise ValueError(f"forward block must have {step} slices, got {block.shape[0]}")
        slices = torch.cat([slices, block])
        records.append(BlockRecord(ConditionMode.FORWARD, rel, hi, step))
        hi += step
        iterations += 1
        if iterations > cfg.max_expansions:
            raise RuntimeError("stitching failed to terminate within its bound")

    while lo > 0:
        condition = slices[:n]
        rel = max(lo - step, 0) / length
        block = sample_block(condition, ConditionMode.BACKWARD, rel)
        if block.shape[0] != step:
            raise ValueError(f"backward block must have {step} slices, got {block.shape[0]}")
        slices = torch.cat([block, slices])
        records.append(BlockRecord(ConditionMode.BACKWARD, rel, lo - step, step))
        lo -= step
        iterations += 1
        if iterations > cfg.max_expansions:
            raise RuntimeError("stitching failed to terminate within its bound")

    # trim overshoot from the outer ends: keep absolute span [0, length)
    offset = -lo
    return slices[offset : offset + length], records


def generate_mask_volume(
    model: WindowDenoiser,
    cfg: GenerationConfig,
    codec: LabelCodec,
    sched: DiffusionSchedule,
    rng: torch.Generator,
) -> MaskVolume:
    """Generate a full mask volume of depth exactly cfg.length by stitched
    subsequence sampling, then decode labels."""

    def sampler(condition, mode, rel_pos):
        return sample_subsequence(
            model,
            condition,
            mode,
            rel_pos,
            cfg.window_len,
            cfg.cond_len,
            sched,
            cfg.guidance_scale,
            rng,
        )

    encoded, _ = stitch_sequence(sampler, cfg, rng)
    return decode_labels(encoded.numpy(), codec)
