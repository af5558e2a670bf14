"""Checkpoint persistence: a torch parameter blob plus a JSON header.

The header carries everything needed to rebuild the module (kind,
architecture hyperparameters, window geometry, schedule reference) and the
training-step count; the blob additionally stores optimizer and generator
state so training can resume on the same random stream.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .imageseq import SliceSequenceGenerator
from .mcdpm import SubsequenceDenoiser
from .refiner import SliceDenoiser, View


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    header: dict,
    optimizer: torch.optim.Optimizer | None = None,
    rng: torch.Generator | None = None,
    progress: int | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob: dict = {"state": model.state_dict()}
    if optimizer is not None:
        blob["optimizer"] = optimizer.state_dict()
    if rng is not None:
        blob["rng_state"] = rng.get_state()
    header = dict(header)
    if progress is not None:
        blob["progress"] = int(progress)
        header["progress"] = int(progress)
    torch.save(blob, path)
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    """Returns (blob, header)."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    blob = torch.load(path, weights_only=True)
    return blob, header


def build_model(header: dict) -> torch.nn.Module:
    kind = header.get("kind")
    if kind == "mask":
        return SubsequenceDenoiser(
            window_len=header["window_len"],
            slice_shape=tuple(header["slice_shape"]),
            width=header["net_width"],
            emb_dim=header["emb_dim"],
        )
    if kind == "image":
        return SliceSequenceGenerator(
            slice_shape=tuple(header["slice_shape"]), width=header["net_width"]
        )
    if kind == "sdm":
        return SliceDenoiser(
            slice_shape=tuple(header["slice_shape"]),
            width=header["net_width"],
            emb_dim=header["emb_dim"],
        )
    raise ValueError(f"unknown checkpoint kind {kind!r}")


def load_model(path: str | Path) -> tuple[torch.nn.Module, dict, dict]:
    """Rebuild the module a checkpoint describes; returns (model, header, blob)."""
    blob, header = load_checkpoint(path)
    model = build_model(header)
    model.load_state_dict(blob["state"])
    model.eval()
    return model, header, blob


def restore_generator(blob: dict) -> torch.Generator | None:
    if "rng_state" not in blob:
        return None
    gen = torch.Generator()
    gen.set_state(blob["rng_state"])
    return gen


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sdm_checkpoint_name(view: View) -> str:
    return f"sdm_{view.name.lower()}.pt"
