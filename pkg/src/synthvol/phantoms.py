"""Procedural multi-label phantom volumes with paired intensity images.

A phantom is built by painting smooth, randomly perturbed ellipsoidal regions
in priority order (body shell first, then each organ), so regions are nested
and non-overlapping by construction. The paired image samples every voxel
from its label's intensity band plus a low-frequency field. Bands are forced
far enough apart (>= 3 pooled standard deviations) that a nearest-band-mean
classifier recovers the mask almost exactly; that classifier is the alignment
oracle used throughout the test suite.

Organs sit at distinct depth ranges so that the per-depth label occupancy
profile carries position information.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import child_seed, numpy_generator
from .volumes import (
    ImageVolume,
    MaskVolume,
    save_image_volume,
    save_mask_volume,
    load_image_volume,
    load_mask_volume,
    volume_checksum,
)


@dataclass(frozen=True)
class IntensityBand:
    mean: float
    std: float


@dataclass(frozen=True)
class EllipsoidRange:
    """Center and radius ranges as fractions of the volume extent.

    Centers are fractions of each axis length; radii are fractions of each
    half-axis. Actual values are drawn uniformly per phantom.
    """

    center: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]
    radii: tuple[tuple[float, float], tuple[float, float], tuple[float, float]]


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int]
    bands: tuple[IntensityBand, ...]
    regions: tuple[EllipsoidRange, ...]  # geometry for labels 1..K-1, painted in order
    deformation: float = 0.15
    field_amplitude: float = 0.02

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"shape must be three positive extents, got {self.shape}")
        if len(self.bands) < 1:
            raise ValueError("at least one intensity band (background) is required")
        if len(self.regions) != len(self.bands) - 1:
            raise ValueError(
                f"need one region per non-background label: "
                f"{len(self.bands)} bands but {len(self.regions)} regions"
            )
        if self.deformation < 0 or self.field_amplitude < 0:
            raise ValueError("deformation and field amplitude must be nonnegative")
        for i, a in enumerate(self.bands):
            for j, b in enumerate(self.bands):
                if i >= j:
                    continue
                pooled = np.sqrt((a.std**2 + b.std**2) / 2.0)
                if abs(a.mean - b.mean) < 3.0 * pooled:
                    raise ValueError(
                        f"intensity bands {i} and {j} are closer than 3 pooled stds "
                        f"({abs(a.mean - b.mean):.3f} < {3 * pooled:.3f})"
                    )

    @property
    def num_labels(self) -> int:
        return len(self.bands)

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(range(self.num_labels))


def default_spec(
    shape: tuple[int, int, int] = (32, 64, 64),
    num_labels: int = 6,
    deformation: float = 0.15,
    field_amplitude: float = 0.02,
) -> PhantomSpec:
    """Toy geometry: a body shell spanning the depth axis plus organs stacked
    at distinct depth fractions."""
    if num_labels < 1:
        raise ValueError("num_labels must be >= 1")
    means = np.linspace(-0.8, 0.8, num_labels) if num_labels > 1 else np.array([-0.8])
    bands = tuple(IntensityBand(float(m), 0.04) for m in means)
    regions: list[EllipsoidRange] = []
    if num_labels >= 2:
        # body shell: near-cylindrical (depth poles outside the volume)
        regions.append(
            EllipsoidRange(
                center=((0.48, 0.52), (0.48, 0.52), (0.48, 0.52)),
                radii=((1.3, 1.6), (0.82, 0.92), (0.82, 0.92)),
            )
        )
    organ_count = max(num_labels - 2, 0)
    for i in range(organ_count):
        frac = 0.5 if organ_count == 1 else 0.28 + 0.44 * i / (organ_count - 1)
        regions.append(
            EllipsoidRange(
                center=(
                    (frac - 0.04, frac + 0.04),
                    (0.35, 0.65),
                    (0.35, 0.65),
                ),
                radii=((0.22, 0.34), (0.18, 0.34), (0.18, 0.34)),
            )
        )
    return PhantomSpec(
        shape=tuple(int(s) for s in shape),
        bands=bands,
        regions=tuple(regions),
        deformation=deformation,
        field_amplitude=field_amplitude,
    )


def _smooth_curve(depth: int, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency random curve over depth, normalized to max |.| = 1."""
    d = np.arange(depth, dtype=np.float64)
    curve = np.zeros(depth)
    for freq in (0.5, 1.0, 2.0):
        amp = rng.uniform(0.2, 1.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        curve += amp * np.sin(2.0 * np.pi * freq * d / max(depth, 1) + phase)
    peak = np.max(np.abs(curve))
    return curve / peak if peak > 0 else curve


def _paint_region(
    mask: np.ndarray, label: int, geom: EllipsoidRange, deformation: float, rng: np.random.Generator
) -> None:
    depth, height, width = mask.shape
    cz = rng.uniform(*geom.center[0]) * depth
    cy = rng.uniform(*geom.center[1]) * height
    cx = rng.uniform(*geom.center[2]) * width
    rz = rng.uniform(*geom.radii[0]) * depth / 2.0
    ry = rng.uniform(*geom.radii[1]) * height / 2.0
    rx = rng.uniform(*geom.radii[2]) * width / 2.0

    # per-depth wobble of in-plane radius and center keeps adjacent slices close
    r_curve = _smooth_curve(depth, rng)
    cy_curve = _smooth_curve(depth, rng)
    cx_curve = _smooth_curve(depth, rng)
    scale = 1.0 + deformation * r_curve
    cy_d = cy + 0.5 * deformation * ry * cy_curve
    cx_d = cx + 0.5 * deformation * rx * cx_curve

    zz = np.arange(depth, dtype=np.float64)
    yy = np.arange(height, dtype=np.float64)
    xx = np.arange(width, dtype=np.float64)
    z_term = ((zz - cz) / rz) ** 2  # (D,)
    y_term = ((yy[None, :] - cy_d[:, None]) / (ry * scale[:, None])) ** 2  # (D, H)
    x_term = ((xx[None, :] - cx_d[:, None]) / (rx * scale[:, None])) ** 2  # (D, W)
    inside = z_term[:, None, None] + y_term[:, :, None] + x_term[:, None, :] <= 1.0
    mask[inside] = label


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[MaskVolume, ImageVolume]:
    """Deterministically generate one paired (mask, image) phantom."""
    rng = numpy_generator(seed)
    depth, height, width = spec.shape
    mask = np.zeros(spec.shape, dtype=np.uint8)
    for label, geom in enumerate(spec.regions, start=1):
        _paint_region(mask, label, geom, spec.deformation, rng)

    means = np.array([b.mean for b in spec.bands])
    stds = np.array([b.std for b in spec.bands])
    image = means[mask] + stds[mask] * rng.standard_normal(spec.shape)
    if spec.field_amplitude > 0:
        zz, yy, xx = np.meshgrid(
            np.arange(depth) / max(depth, 1),
            np.arange(height) / max(height, 1),
            np.arange(width) / max(width, 1),
            indexing="ij",
        )
        f = np.zeros(spec.shape)
        for _ in range(3):
            freqs = rng.uniform(0.5, 2.0, size=3)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            f += np.cos(2.0 * np.pi * (freqs[0] * zz + freqs[1] * yy + freqs[2] * xx) + phase)
        image = image + spec.field_amplitude * f / 3.0
    image = np.clip(image, -1.0, 1.0).astype(np.float32)
    return MaskVolume(mask, spec.labels), ImageVolume(image)


def band_classify(image: ImageVolume | np.ndarray, spec: PhantomSpec) -> np.ndarray:
    """Intensity-band oracle: assign every voxel to the label with the nearest
    band mean. On phantom images this recovers the mask almost exactly."""
    voxels = image.voxels if isinstance(image, ImageVolume) else np.asarray(image)
    means = np.array([b.mean for b in spec.bands], dtype=np.float64)
    dist = np.abs(voxels[..., None].astype(np.float64) - means)
    return dist.argmin(axis=-1).astype(np.uint8)


def _perimeter(binary: np.ndarray) -> int:
    p = int(np.sum(binary[1:] != binary[:-1])) + int(np.sum(binary[:, 1:] != binary[:, :-1]))
    p += int(binary[0].sum() + binary[-1].sum() + binary[:, 0].sum() + binary[:, -1].sum())
    return p


def continuity_statistic(mask: MaskVolume | np.ndarray) -> float:
    """Mean boundary displacement (voxels) between adjacent slices, over all
    non-background labels and slice pairs where the label is present in both."""
    voxels = mask.voxels if isinstance(mask, MaskVolume) else np.asarray(mask)
    displacements = []
    for label in np.unique(voxels):
        if label == 0:
            continue
        for d in range(voxels.shape[0] - 1):
            a = voxels[d] == label
            b = voxels[d + 1] == label
            if not a.any() or not b.any():
                continue
            perim = 0.5 * (_perimeter(a) + _perimeter(b))
            if perim == 0:
                continue
            displacements.append(float(np.logical_xor(a, b).sum()) / perim)
    return float(np.mean(displacements)) if displacements else 0.0


# --- datasets -------------------------------------------------------------------


@dataclass
class PhantomDataset:
    spec: PhantomSpec
    master_seed: int
    seeds: list[int]
    pairs: list[tuple[MaskVolume, ImageVolume]]
    train_indices: list[int]
    val_indices: list[int]

    @property
    def train_pairs(self) -> list[tuple[MaskVolume, ImageVolume]]:
        return [self.pairs[i] for i in self.train_indices]

    @property
    def val_pairs(self) -> list[tuple[MaskVolume, ImageVolume]]:
        return [self.pairs[i] for i in self.val_indices]


def make_dataset(
    count: int, spec: PhantomSpec, seed: int, val_fraction: float = 0.2
) -> PhantomDataset:
    """Generate `count` phantoms with per-volume seeds derived from `seed` and
    split them train/val (default 80/20, both sides nonempty)."""
    if count < 2:
        raise ValueError(f"dataset needs at least 2 volumes, got {count}")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    seeds = [child_seed(seed, "phantom", i) for i in range(count)]
    pairs = [generate_phantom(spec, s) for s in seeds]
    n_train = int(round(count * (1.0 - val_fraction)))
    n_train = max(1, min(count - 1, n_train))
    return PhantomDataset(
        spec=spec,
        master_seed=seed,
        seeds=seeds,
        pairs=pairs,
        train_indices=list(range(n_train)),
        val_indices=list(range(n_train, count)),
    )


def spec_to_dict(spec: PhantomSpec) -> dict:
    return {
        "shape": list(spec.shape),
        "bands": [[b.mean, b.std] for b in spec.bands],
        "regions": [
            {"center": [list(c) for c in r.center], "radii": [list(c) for c in r.radii]}
            for r in spec.regions
        ],
        "deformation": spec.deformation,
        "field_amplitude": spec.field_amplitude,
    }


def spec_from_dict(doc: dict) -> PhantomSpec:
    return PhantomSpec(
        shape=tuple(int(v) for v in doc["shape"]),
        bands=tuple(IntensityBand(float(m), float(s)) for m, s in doc["bands"]),
        regions=tuple(
            EllipsoidRange(
                center=tuple(tuple(float(v) for v in c) for c in r["center"]),
                radii=tuple(tuple(float(v) for v in c) for c in r["radii"]),
            )
            for r in doc["regions"]
        ),
        deformation=float(doc.get("deformation", 0.15)),
        field_amplitude=float(doc.get("field_amplitude", 0.02)),
    )


def save_dataset(dataset: PhantomDataset, directory: str | Path) -> Path:
    """Persist all volumes plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ((mask, image), vol_seed) in enumerate(zip(dataset.pairs, dataset.seeds)):
        name = f"phantom_{i:04d}"
        save_mask_volume(directory / f"{name}_mask", mask, seed=vol_seed)
        save_image_volume(directory / f"{name}_image", image, seed=vol_seed)
        entries.append(
            {
                "name": name,
                "seed": vol_seed,
                "split": "train" if i in dataset.train_indices else "val",
                "mask_checksum": volume_checksum(mask.voxels),
                "image_checksum": volume_checksum(image.voxels),
            }
        )
    manifest = {
        "master_seed": dataset.master_seed,
        "spec": spec_to_dict(dataset.spec),
        "volumes": entries,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(directory: str | Path) -> PhantomDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    spec = spec_from_dict(manifest["spec"])
    pairs, seeds, train_idx, val_idx = [], [], [], []
    for i, entry in enumerate(manifest["volumes"]):
        mask = load_mask_volume(directory / f"{entry['name']}_mask")
        image = load_image_volume(directory / f"{entry['name']}_image")
        pairs.append((mask, image))
        seeds.append(entry["seed"])
        (train_idx if entry["split"] == "train" else val_idx).append(i)
    return PhantomDataset(
        spec=spec,
        master_seed=manifest["master_seed"],
        seeds=seeds,
        pairs=pairs,
        train_indices=train_idx,
        val_indices=val_idx,
    )
