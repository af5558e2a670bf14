"""Fidelity, diversity and alignment metrics plus a toy downstream study.

Fidelity is a Fréchet distance between Gaussian fits of handcrafted per-slice
features (intensity histogram, gradient-magnitude histogram, 8x8 block
means), computed per view and averaged over the three views. Diversity is
the mean pairwise voxel distance within a set. Alignment scores a generated
pair by recovering a mask from the image with the phantom intensity-band
oracle and computing per-label Dice against the paired mask. The downstream
study trains small 2-D and 3-D segmenters under several data strategies and
reports test Dice; results are reported, not asserted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .nets import SmallUNet, init_parameters
from .phantoms import PhantomSpec, band_classify
from .seeding import child_seed, torch_generator
from .volumes import ImageVolume, MaskVolume, volume_checksum

VIEW_NAMES = ("axial", "coronal", "sagittal")


def _voxels(volume: ImageVolume | MaskVolume | np.ndarray) -> np.ndarray:
    if isinstance(volume, (ImageVolume, MaskVolume)):
        return volume.voxels
    return np.asarray(volume)


# --- fidelity -------------------------------------------------------------------


def slice_features(volume: np.ndarray, axis: int, bins: int = 16) -> np.ndarray:
    """Per-slice feature rows along `axis`: normalized intensity histogram over
    [-1, 1], gradient-magnitude histogram over [0, 2], and 8x8 block means."""
    slices = np.moveaxis(volume, axis, 0).astype(np.float64)
    rows = []
    for sl in slices:
        hist, _ = np.histogram(sl, bins=bins, range=(-1.0, 1.0))
        gy, gx = np.gradient(sl)
        grad = np.hypot(gy, gx)
        ghist, _ = np.histogram(grad, bins=bins, range=(0.0, 2.0))
        blocks = [
            b.mean()
            for row in np.array_split(sl, 8, axis=0)
            for b in np.array_split(row, 8, axis=1)
        ]
        rows.append(
            np.concatenate([hist / sl.size, ghist / sl.size, np.asarray(blocks)])
        )
    return np.stack(rows)


def gaussian_frechet(feats_a: np.ndarray, feats_b: np.ndarray, ridge: float = 1e-6) -> float:
    """Squared Fréchet distance between Gaussian fits of two feature clouds,
    ||mu_a-mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2)); `ridge` is added to both
    covariance diagonals to absorb degeneracy."""
    feats_a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    feats_b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise ValueError("each feature cloud needs at least 2 rows")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    eye = ridge * np.eye(feats_a.shape[1])
    cov_a = np.cov(feats_a, rowvar=False) + eye
    cov_b = np.cov(feats_b, rowvar=False) + eye
    w, v = np.linalg.eigh(cov_a)
    sqrt_a = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    inner = sqrt_a @ cov_b @ sqrt_a
    cross = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh((inner + inner.T) / 2.0), 0.0, None)))
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * cross)
    return max(d2, 0.0)


def frechet_proxy(
    real: Sequence[ImageVolume | np.ndarray],
    synth: Sequence[ImageVolume | np.ndarray],
    bins: int = 16,
) -> dict[str, float]:
    """Per-view Fréchet scores between two volume sets plus their 3-view mean."""
    if len(real) < 2 or len(synth) < 2:
        raise ValueError("each set needs at least 2 volumes")
    scores: dict[str, float] = {}
    for axis, name in enumerate(VIEW_NAMES):
        feats_real = np.concatenate([slice_features(_voxels(v), axis, bins) for v in real])
        feats_synth = np.concatenate([slice_features(_voxels(v), axis, bins) for v in synth])
        scores[name] = gaussian_frechet(feats_real, feats_synth)
    scores["mean"] = float(np.mean([scores[n] for n in VIEW_NAMES]))
    return scores


# --- diversity ------------------------------------------------------------------


def diversity_score(volumes: Sequence[ImageVolume | np.ndarray]) -> float:
    """Mean over all volume pairs of the mean absolute voxel difference."""
    if len(volumes) < 2:
        raise ValueError("diversity needs at least 2 volumes")
    arrays = [_voxels(v).astype(np.float64) for v in volumes]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("all volumes must share one shape")
    total, count = 0.0, 0
    for i in range(len(arrays)):
        for j in range(i + 1, len(arrays)):
            total += float(np.mean(np.abs(arrays[i] - arrays[j])))
            count += 1
    return total / count


# --- alignment ------------------------------------------------------------------


def dice_per_label(
    pred: np.ndarray, truth: np.ndarray, labels: Sequence[int]
) -> dict[int, float]:
    """Per-label Dice; labels empty in both volumes are omitted (undefined)."""
    out: dict[int, float] = {}
    for label in labels:
        a = pred == label
        b = truth == label
        denom = int(a.sum()) + int(b.sum())
        if denom == 0:
            continue
        out[int(label)] = 2.0 * float(np.logical_and(a, b).sum()) / denom
    return out


def alignment_dice(
    image: ImageVolume, mask: MaskVolume, spec: PhantomSpec
) -> dict[int, float]:
    """Dice between the intensity-band-oracle mask of `image` and `mask`."""
    recovered = band_classify(image, spec)
    return dice_per_label(recovered, mask.voxels, spec.labels)


# --- downstream study -----------------------------------------------------------

STRATEGIES = ("real-only", "synth-only", "real+synth", "synth-pretrain")
SEGMENTERS = ("slice2d", "conv3d")


class SliceSegmenter(nn.Module):
    """2-D per-slice segmenter."""

    def __init__(self, num_labels: int, width: int = 16):
        super().__init__()
        self.net = SmallUNet(1, num_labels, width=width, emb_dim=0)

    def forward(self, x):  # (B, H, W) -> (B, K, H, W)
        return self.net(x[:, None])


class VolumeSegmenter(nn.Module):
    """3-D whole-volume segmenter."""

    def __init__(self, num_labels: int, width: int = 8):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(1, width, 3, padding=1),
            nn.GroupNorm(min(4, width), width),
            nn.SiLU(),
            nn.Conv3d(width, width, 3, padding=1),
            nn.GroupNorm(min(4, width), width),
            nn.SiLU(),
            nn.Conv3d(width, num_labels, 1),
        )

    def forward(self, x):  # (B, D, H, W) -> (B, K, D, H, W)
        return self.body(x[:, None])


def _label_indices(mask: np.ndarray, labels: Sequence[int]) -> np.ndarray:
    return np.searchsorted(np.asarray(labels), mask)


def _train_segmenter(
    kind: str,
    pairs: Sequence[tuple[MaskVolume, ImageVolume]],
    labels: Sequence[int],
    steps: int,
    rng: torch.Generator,
    lr: float = 2e-3,
    batch_size: int = 8,
    model: nn.Module | None = None,
) -> nn.Module:
    images = [torch.from_numpy(img.voxels) for _, img in pairs]
    targets = [torch.from_numpy(_label_indices(m.voxels, labels)).long() for m, _ in pairs]
    if model is None:
        model = (
            SliceSegmenter(len(labels)) if kind == "slice2d" else VolumeSegmenter(len(labels))
        )
        init_parameters(model, rng)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    if kind == "slice2d":
        all_slices = torch.cat(images)
        all_targets = torch.cat(targets)
        for _ in range(steps):
            idx = torch.randint(0, all_slices.shape[0], (batch_size,), generator=rng)
            logits = model(all_slices[idx])
            loss = F.cross_entropy(logits, all_targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    else:
        for _ in range(steps):
            idx = torch.randint(0, len(images), (min(2, len(images)),), generator=rng)
            batch = torch.stack([images[int(i)] for i in idx])
            tgt = torch.stack([targets[int(i)] for i in idx])
            logits = model(batch)
            loss = F.cross_entropy(logits, tgt)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


def _eval_segmenter(
    model: nn.Module,
    kind: str,
    test_pairs: Sequence[tuple[MaskVolume, ImageVolume]],
    labels: Sequence[int],
) -> dict[int, float]:
    per_label: dict[int, list[float]] = {}
    labels_arr = np.asarray(labels)
    with torch.no_grad():
        for mask, image in test_pairs:
            x = torch.from_numpy(image.voxels)
            if kind == "slice2d":
                pred_idx = model(x).argmax(dim=1).numpy()
            else:
                pred_idx = model(x[None]).argmax(dim=1)[0].numpy()
            pred = labels_arr[pred_idx]
            for label, score in dice_per_label(pred, mask.voxels, labels).items():
                per_label.setdefault(label, []).append(score)
    return {label: float(np.mean(scores)) for label, scores in sorted(per_label.items())}


def downstream_study(
    real_pairs: Sequence[tuple[MaskVolume, ImageVolume]],
    synth_pairs: Sequence[tuple[MaskVolume, ImageVolume]],
    test_pairs: Sequence[tuple[MaskVolume, ImageVolume]],
    labels: Sequence[int],
    strategies: Sequence[str] = STRATEGIES,
    segmenters: Sequence[str] = SEGMENTERS,
    steps: int = 300,
    seed: int = 0,
) -> dict[str, dict[str, dict[int, float]]]:
    """Train each (segmenter, strategy) with its own derived seed and report
    mean per-label test Dice. Train/test overlap (by image checksum) is
    rejected; synthetic data may duplicate real training data."""
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise ValueError(f"unknown strategies {sorted(unknown)}; valid: {STRATEGIES}")
    unknown = set(segmenters) - set(SEGMENTERS)
    if unknown:
        raise ValueError(f"unknown segmenters {sorted(unknown)}; valid: {SEGMENTERS}")
    test_sums = {volume_checksum(img.voxels) for _, img in test_pairs}
    for name, pairs in (("real", real_pairs), ("synthetic", synth_pairs)):
        for _, img in pairs:
            if volume_checksum(img.voxels) in test_sums:
                raise ValueError(f"{name} training volume also appears in the test set")

    data_for = {
        "real-only": list(real_pairs),
        "synth-only": list(synth_pairs),
        "real+synth": list(real_pairs) + list(synth_pairs),
    }
    table: dict[str, dict[str, dict[int, float]]] = {}
    for kind in segmenters:
        table[kind] = {}
        for strategy in strategies:
            rng = torch_generator(child_seed(seed, "downstream", kind, strategy))
            if strategy == "synth-pretrain":
                model = _train_segmenter(kind, synth_pairs, labels, steps, rng)
                model = _train_segmenter(kind, real_pairs, labels, steps, rng, model=model)
            else:
                model = _train_segmenter(kind, data_for[strategy], labels, steps, rng)
            table[kind][strategy] = _eval_segmenter(model, kind, test_pairs, labels)
    return table


# --- report ---------------------------------------------------------------------


@dataclass
class EvalReport:
    fidelity: dict[str, float]
    diversity: float
    alignment: dict[int, float] = field(default_factory=dict)
    downstream: dict[str, dict[str, dict[int, float]]] | None = None

    def __post_init__(self):
        if any(v < 0 for v in self.fidelity.values()) or self.diversity < 0:
            raise ValueError("fidelity and diversity must be nonnegative")
        for label, score in self.alignment.items():
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"alignment Dice for label {label} outside [0, 1]: {score}")

    def to_json_dict(self) -> dict:
        doc = {
            "fidelity": self.fidelity,
            "diversity": self.diversity,
            "alignment": {str(k): v for k, v in self.alignment.items()},
        }
        if self.downstream is not None:
            doc["downstream"] = {
                kind: {strat: {str(k): v for k, v in row.items()} for strat, row in rows.items()}
                for kind, rows in self.downstream.items()
            }
        return doc

    def to_text(self) -> str:
        lines = ["== fidelity (Frechet proxy, lower is better) =="]
        for name in (*VIEW_NAMES, "mean"):
            if name in self.fidelity:
                lines.append(f"  {name:<9} {self.fidelity[name]:.6f}")
        lines.append(f"== diversity ==\n  mean pairwise distance  {self.diversity:.6f}")
        if self.alignment:
            lines.append("== alignment (per-label Dice, image vs mask) ==")
            for label, score in sorted(self.alignment.items()):
                lines.append(f"  label {label:<3} {score:.4f}")
        if self.downstream:
            lines.append("== downstream study (test Dice) ==")
            for kind, rows in self.downstream.items():
                labels = sorted({k for row in rows.values() for k in row})
                header = "    ".join(f"L{label}" for label in labels)
                lines.append(f"  [{kind}]")
                lines.append(f"    {'strategy':<16} {header}")
                for strat, row in rows.items():
                    cells = "  ".join(f"{row.get(label, float('nan')):.4f}" for label in labels)
                    lines.append(f"    {strat:<16} {cells}")
        return "\n".join(lines) + "\n"
