"""Volume data types, the discrete-label codec, and raw+sidecar file IO.

Masks are D x H x W arrays of small nonnegative integer labels (0 is
background); images are D x H x W float32 intensities, nominally in [-1, 1].
Both persist as raw little-endian arrays next to a JSON sidecar describing
shape, dtype and provenance, so volumes remain readable without this package.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASK_DTYPE = np.dtype("uint8")
IMAGE_DTYPE = np.dtype("<f4")


@dataclass
class MaskVolume:
    """Discrete multi-label volume. Every voxel's label must be permitted."""

    voxels: np.ndarray
    labels: tuple[int, ...]

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=MASK_DTYPE)
        self.labels = tuple(int(v) for v in self.labels)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"mask must be a D x H x W array, got shape {self.voxels.shape}")
        present = np.unique(self.voxels)
        unknown = set(int(v) for v in present) - set(self.labels)
        if unknown:
            raise ValueError(f"mask contains labels outside the permitted set: {sorted(unknown)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class ImageVolume:
    """Continuous-intensity volume; values must be finite."""

    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"image must be a D x H x W array, got shape {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("image contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class LabelCodec:
    """Bijection between K discrete labels and K evenly spaced values in [-1, 1].

    Labels are kept in ascending order so that decode's tie-break toward the
    smaller encoded value is also a tie-break toward the smaller label.
    """

    labels: tuple[int, ...]
    values: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = tuple(sorted(int(v) for v in self.labels))
        if len(labels) == 0:
            raise ValueError("codec needs at least one label")
        if len(set(labels)) != len(labels):
            raise ValueError(f"codec labels must be distinct, got {self.labels}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "values", np.linspace(-1.0, 1.0, len(labels)))

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    def encode_value(self, label: int) -> float:
        try:
            return float(self.values[self.labels.index(int(label))])
        except ValueError:
            raise ValueError(f"unknown label {label}; codec knows {self.labels}") from None

    def encode_array(self, labels: np.ndarray) -> np.ndarray:
        """Voxelwise label -> encoded value; raises on labels outside the codec."""
        label_arr = np.asarray(self.labels)
        idx = np.searchsorted(label_arr, labels)
        idx_clipped = np.clip(idx, 0, len(label_arr) - 1)
        if not np.array_equal(label_arr[idx_clipped], labels):
            bad = np.unique(np.asarray(labels)[label_arr[idx_clipped] != labels])
            raise ValueError(f"unknown labels {bad.tolist()}; codec knows {self.labels}")
        return self.values[idx_clipped].astype(np.float32)

    def decode_array(self, encoded: np.ndarray) -> np.ndarray:
        """Quantize to the nearest encoded value; exact midpoints go to the smaller label."""
        encoded = np.asarray(encoded, dtype=np.float64)
        if not np.all(np.isfinite(encoded)):
            raise ValueError("cannot decode non-finite values")
        if self.num_labels == 1:
            return np.full(encoded.shape, self.labels[0], dtype=MASK_DTYPE)
        step = 2.0 / (self.num_labels - 1)
        # ceil(v - 0.5) rounds halves down, i.e. toward the smaller index/label
        idx = np.ceil((encoded + 1.0) / step - 0.5).astype(np.int64)
        idx = np.clip(idx, 0, self.num_labels - 1)
        return np.asarray(self.labels, dtype=MASK_DTYPE)[idx]


def encode_labels(mask: MaskVolume, codec: LabelCodec) -> np.ndarray:
    """Replace each voxel's label with its encoded value in [-1, 1]."""
    return codec.encode_array(mask.voxels)


def decode_labels(encoded: np.ndarray, codec: LabelCodec) -> MaskVolume:
    """Quantize a continuous volume back to a MaskVolume over the codec's labels."""
    return MaskVolume(voxels=codec.decode_array(encoded), labels=codec.labels)


# --- raw + sidecar persistence -------------------------------------------------


def volume_checksum(voxels: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(voxels).tobytes()).hexdigest()


def _write_pair(stem: Path, voxels: np.ndarray, sidecar: dict) -> None:
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".raw").write_bytes(voxels.tobytes())
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def save_mask_volume(
    stem: str | Path, mask: MaskVolume, seed: int | None = None, config: dict | str | None = None
) -> None:
    stem = Path(stem)
    sidecar = {
        "kind": "mask",
        "shape": list(mask.shape),
        "dtype": "uint8",
        "labels": list(mask.labels),
        "seed": seed,
        "config": config,
    }
    _write_pair(stem, mask.voxels, sidecar)


def load_mask_volume(stem: str | Path) -> MaskVolume:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("kind") != "mask":
        raise ValueError(f"{stem} is not a mask volume (kind={meta.get('kind')!r})")
    raw = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype=MASK_DTYPE)
    voxels = raw.reshape(meta["shape"]).copy()
    return MaskVolume(voxels=voxels, labels=tuple(meta["labels"]))


def save_image_volume(
    stem: str | Path, image: ImageVolume, seed: int | None = None, config: dict | str | None = None
) -> None:
    stem = Path(stem)
    sidecar = {
        "kind": "image",
        "shape": list(image.shape),
        "dtype": "float32",
        "seed": seed,
        "config": config,
    }
    _write_pair(stem, image.voxels.astype(IMAGE_DTYPE), sidecar)


def load_image_volume(stem: str | Path) -> ImageVolume:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("kind") != "image":
        raise ValueError(f"{stem} is not an image volume (kind={meta.get('kind')!r})")
    raw = np.frombuffer(stem.with_suffix(".raw").read_bytes(), dtype=IMAGE_DTYPE)
    voxels = raw.reshape(meta["shape"]).astype(np.float32)
    return ImageVolume(voxels=voxels)


def slice_grid(volume: np.ndarray, axis: int = 0, pad: int = 1) -> np.ndarray:
    """Tile all slices along `axis` into a near-square 2-D grid (for PNG export)."""
    slices = np.moveaxis(volume, axis, 0)
    count = slices.shape[0]
    cols = int(math.ceil(math.sqrt(count)))
    rows = int(math.ceil(count / cols))
    h, w = slices.shape[1], slices.shape[2]
    grid = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad), dtype=slices.dtype)
    for i in range(count):
        r, c = divmod(i, cols)
        grid[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = slices[i]
    return grid
