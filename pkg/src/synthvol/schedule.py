"""Noise schedules and closed-form mechanics of a discrete diffusion chain.

The forward process q(x_t | x_{t-1}) = N(x_t; sqrt(1-beta_t) x_{t-1}, beta_t I)
admits a closed form at any timestep,

    x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps,    eps ~ N(0, I),

with alpha_t = 1 - beta_t and abar_t = prod_{s<=t} alpha_s. The reverse
(ancestral) step reconstructs x_{t-1} from a noise prediction eps_hat,

    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t) + sigma_t z,

with the simple variance choice sigma_t^2 = beta_t and z ~ N(0, I) for t > 1,
z = 0 for the final step. Timesteps are 1-based; abar(0) = 1 is the pre-chain
state. All coefficient tables are kept in float64 and cast to the data dtype
at use sites.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch

SCHEDULE_KIND = "linear"


@dataclass(frozen=True)
class DiffusionSchedule:
    """Coefficient tables (beta, alpha, cumulative alpha) for a chain of length T.

    Arrays are indexed by t-1 for t in 1..T; use the accessors to stay in the
    1-based timestep convention.
    """

    num_steps: int
    beta_start: float
    beta_end: float
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    def _check_t(self, t: int | torch.Tensor, low: int = 1) -> None:
        if isinstance(t, torch.Tensor):
            if t.numel() == 0 or int(t.min()) < low or int(t.max()) > self.num_steps:
                raise ValueError(
                    f"timestep out of range [{low}, {self.num_steps}]: {t.tolist()}"
                )
        elif not low <= int(t) <= self.num_steps:
            raise ValueError(f"timestep {t} out of range [{low}, {self.num_steps}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int | torch.Tensor) -> float | torch.Tensor:
        """Cumulative signal coefficient; abar(0) = 1 by convention."""
        self._check_t(t, low=0)
        if isinstance(t, torch.Tensor):
            pad = torch.cat([torch.ones(1, dtype=self.alpha_bars.dtype), self.alpha_bars])
            return pad[t.long()]
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])


def make_schedule(num_steps: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Build a linear beta schedule inclusive of both endpoints.

    Raises ValueError for non-positive length or endpoints outside (0, 1).
    """
    if not isinstance(num_steps, int) or num_steps < 1:
        raise ValueError(f"chain length must be a positive integer, got {num_steps!r}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError(f"beta endpoints must lie in (0, 1), got ({beta_start}, {beta_end})")
    if beta_start > beta_end:
        raise ValueError(f"beta_start must not exceed beta_end, got ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return DiffusionSchedule(
        num_steps=num_steps,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
    )


def q_sample(
    x0: torch.Tensor,
    t: int | torch.Tensor,
    eps: torch.Tensor,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Diffuse x0 to timestep t in closed form: sqrt(abar_t) x0 + sqrt(1-abar_t) eps.

    `t` may be a scalar or a 1-D tensor with one timestep per leading-dim entry.
    """
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != input shape {tuple(x0.shape)}")
    abar = sched.alpha_bar(t)
    if isinstance(abar, torch.Tensor):
        if abar.shape[0] != x0.shape[0]:
            raise ValueError("per-example timesteps must match the leading dimension")
        abar = abar.reshape(-1, *([1] * (x0.ndim - 1))).to(x0.dtype)
        return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps
    scale = abar**0.5
    noise_scale = (1.0 - abar) ** 0.5
    return scale * x0 + noise_scale * eps


def reverse_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    sched: DiffusionSchedule,
    noise: torch.Tensor | float,
) -> torch.Tensor:
    """One ancestral denoising step from x_t to x_{t-1} given predicted noise.

    The caller supplies `noise`: standard-normal for t > 1, zero for t = 1.
    """
    if eps_hat.shape != x_t.shape:
        raise ValueError(
            f"prediction shape {tuple(eps_hat.shape)} != input shape {tuple(x_t.shape)}"
        )
    beta = sched.beta(t)
    alpha = sched.alpha(t)
    abar = sched.alpha_bar(t)
    mean = (x_t - (beta / (1.0 - abar) ** 0.5) * eps_hat) / alpha**0.5
    return mean + beta**0.5 * noise


def ddpm_loss(
    denoiser: Callable[[torch.Tensor, int], torch.Tensor],
    x0: torch.Tensor,
    t: int,
    eps: torch.Tensor,
    sched: DiffusionSchedule,
) -> torch.Tensor:
    """Noise-prediction training loss: mean squared error between eps and eps_hat.

    `denoiser` receives the diffused tensor and the timestep.
    """
    x_t = q_sample(x0, t, eps, sched)
    eps_hat = denoiser(x_t, t)
    if eps_hat.shape != eps.shape:
        raise ValueError(
            f"denoiser output shape {tuple(eps_hat.shape)} != noise shape {tuple(eps.shape)}"
        )
    return torch.mean((eps - eps_hat) ** 2)


def schedule_to_dict(sched: DiffusionSchedule) -> dict:
    return {
        "T": sched.num_steps,
        "beta_start": sched.beta_start,
        "beta_end": sched.beta_end,
        "kind": SCHEDULE_KIND,
    }


def schedule_from_dict(doc: dict) -> DiffusionSchedule:
    """Rebuild a schedule from its JSON form; derived tables are recomputed."""
    kind = doc.get("kind", SCHEDULE_KIND)
    if kind != SCHEDULE_KIND:
        raise ValueError(f"unsupported schedule kind {kind!r}")
    return make_schedule(int(doc["T"]), float(doc["beta_start"]), float(doc["beta_end"]))


def save_schedule(sched: DiffusionSchedule, path: str | Path) -> None:
    Path(path).write_text(json.dumps(schedule_to_dict(sched), indent=2))


def load_schedule(path: str | Path) -> DiffusionSchedule:
    return schedule_from_dict(json.loads(Path(path).read_text()))
