"""Synthetic paired corpus: lung phantoms with TB-like findings plus their
mean-projection radiographs.

A phantom is two ellipsoidal lung fields inside a brighter body ellipsoid.
Findings follow their radiological appearance: granulomas are bright compact
nodules, cavitations dark rounded holes, calcifications clusters of tiny
bone-white flecks; post-infection scarring shrinks the lungs and adds thin
bright streaks. Geometry offsets are fixed constants so detection margins are
stable; all jitter (placement, radii, noise) comes from the record seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .data_model import (
    DiseaseLabel,
    ImagePlane2D,
    PatientRecord,
    Provenance,
    Split,
    Volume3D,
    largest_remainder_counts,
    save_image_16bit,
    save_manifest,
    stratified_splits,
    write_volume,
)

FINDING_NAMES = ("granuloma", "cavitation", "calcification")

# Intensity model (all values in [0, 1]).
AIR_VALUE = 0.0
BODY_VALUE = 0.75
DEFAULT_LUNG_BASELINE = 0.40
GRANULOMA_BRIGHTNESS = 0.50   # offset above lung baseline
CAVITATION_DARKNESS = 0.38    # offset below lung baseline
CALCIFICATION_BRIGHTNESS = 0.50
STREAK_BRIGHTNESS = 0.20

GRANULOMA_RADIUS_RANGE = (3.0, 5.0)
CAVITATION_RADIUS_RANGE = (6.0, 10.0)
FLECK_RADIUS = 2.0
FLECK_SPACING = 5             # lattice step keeping flecks disconnected
FLECK_COUNT_RANGE = (12, 18)
SHRINK_RANGE = (0.8, 0.9)     # per-axis lung shrink for scarring
STREAK_COUNT_RANGE = (1, 3)


class ProjectionAxis(str, Enum):
    PA = "pa"          # project along depth
    LATERAL = "lateral"  # project along width


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for one phantom; a pure function of its fields via the seed."""

    dims: tuple[int, int, int] = (64, 128, 128)
    lung_baseline: float = DEFAULT_LUNG_BASELINE
    finding_set: frozenset[str] = frozenset({"none"})
    sequelae: int = 0
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "finding_set", frozenset(self.finding_set))
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise ValueError(f"dims must be three sizes >= 8, got {self.dims}")
        if not 0.38 <= self.lung_baseline <= 0.5:
            # keeps cavity >= 0 and granuloma <= 1 with the fixed offsets
            raise ValueError(
                f"lung_baseline must lie in [0.38, 0.5], got {self.lung_baseline}"
            )
        bad = self.finding_set - set(FINDING_NAMES) - {"none"}
        if bad or not self.finding_set:
            raise ValueError(f"unknown finding(s) {sorted(bad)!r}")
        if "none" in self.finding_set and self.finding_set != {"none"}:
            raise ValueError("finding_set may contain 'none' only on its own")
        if self.finding_set == {"none"} and self.sequelae:
            raise ValueError("a healthy phantom (finding_set={'none'}) cannot be sequelae")
        if self.sequelae not in (0, 1):
            raise ValueError("sequelae must be 0 or 1")
        if not 0.0 <= self.noise_sigma < self.lung_baseline:
            raise ValueError("noise_sigma must satisfy 0 <= sigma < lung_baseline")

    @property
    def healthy(self) -> bool:
        return self.finding_set == {"none"}

    def label(self) -> DiseaseLabel:
        findings = self.finding_set - {"none"}
        return DiseaseLabel(
            tb=0 if self.healthy else 1,
            sequelae=int(self.sequelae),
            granuloma=int("granuloma" in findings),
            cavitation=int("cavitation" in findings),
            calcification=int("calcification" in findings),
        )


def lung_geometry(
    dims: tuple[int, int, int], shrink: float = 1.0
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Centers and semi-axes of the body and both lung ellipsoids (d, h, w)."""
    d, h, w = (float(x) for x in dims)
    body = (np.array([d / 2, h / 2, w / 2]), np.array([0.40 * d, 0.46 * h, 0.44 * w]))
    lung_semi = np.array([0.30 * d, 0.34 * h, 0.16 * w]) * shrink
    left = (np.array([d / 2, 0.48 * h, w / 2 - 0.22 * w]), lung_semi)
    right = (np.array([d / 2, 0.48 * h, w / 2 + 0.22 * w]), lung_semi.copy())
    return {"body": body, "lung_left": left, "lung_right": right}


def ellipsoid_mask(
    dims: tuple[int, int, int], center: np.ndarray, semi: np.ndarray
) -> np.ndarray:
    d, h, w = np.ogrid[: dims[0], : dims[1], : dims[2]]
    return (
        ((d - center[0]) / semi[0]) ** 2
        + ((h - center[1]) / semi[1]) ** 2
        + ((w - center[2]) / semi[2]) ** 2
    ) <= 1.0


def _paint_sphere(vol: np.ndarray, center: np.ndarray, radius: float, value: float) -> None:
    lo = np.maximum(np.floor(center - radius).astype(int), 0)
    hi = np.minimum(np.ceil(center + radius).astype(int) + 1, vol.shape)
    d, h, w = np.ogrid[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    mask = (d - center[0]) ** 2 + (h - center[1]) ** 2 + (w - center[2]) ** 2 <= radius**2
    vol[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]][mask] = value


def _place_inside(
    rng: np.random.Generator,
    center: np.ndarray,
    semi: np.ndarray,
    radius: float,
    h_zone: Optional[str] = None,
) -> np.ndarray:
    """Sample a sphere center whose full extent stays inside the ellipsoid.

    The center is drawn from the ellipsoid scaled so that any contained point
    is at least radius+1 voxels from the boundary; h_zone restricts placement
    to the upper or lower half so distinct findings cannot merge.
    """
    scale = 1.0 - (radius + 1.0) / float(np.min(semi))
    if scale <= 0.05:
        raise ValueError(f"finding radius {radius} too large for lung semi-axes {semi}")
    f_d = rng.uniform(-0.5, 0.5)
    if h_zone == "upper":
        f_h = rng.uniform(-0.5, -0.15)
    elif h_zone == "lower":
        f_h = rng.uniform(0.15, 0.5)
    else:
        f_h = rng.uniform(-0.5, 0.5)
    f_w = rng.uniform(-0.5, 0.5)
    return center + np.array([f_d, f_h, f_w]) * scale * semi


def generate_phantom(spec: PhantomSpec) -> tuple[Volume3D, DiseaseLabel]:
    """Render a phantom volume and its matching label, deterministic in seed."""
    rng = np.random.default_rng(spec.seed)
    dims = tuple(int(d) for d in spec.dims)
    baseline = float(spec.lung_baseline)

    shrink = 1.0
    if spec.sequelae:
        shrink = float(rng.uniform(*SHRINK_RANGE))
    geo = lung_geometry(dims, shrink=shrink)

    vol = np.full(dims, AIR_VALUE, dtype=np.float64)
    vol[ellipsoid_mask(dims, *geo["body"])] = BODY_VALUE
    for lung in ("lung_left", "lung_right"):
        vol[ellipsoid_mask(dims, *geo[lung])] = baseline

    if spec.sequelae:
        _paint_streaks(vol, rng, geo, baseline)

    findings = spec.finding_set - {"none"}
    granuloma_center = None
    if "granuloma" in findings:
        radius = float(rng.uniform(*GRANULOMA_RADIUS_RANGE))
        granuloma_center = _place_inside(rng, *geo["lung_left"], radius, h_zone="upper")
        _paint_sphere(vol, granuloma_center, radius, baseline + GRANULOMA_BRIGHTNESS)
    if "cavitation" in findings:
        radius = float(rng.uniform(*CAVITATION_RADIUS_RANGE))
        center = _place_inside(rng, *geo["lung_right"], radius)
        _paint_sphere(vol, center, radius, baseline - CAVITATION_DARKNESS)
    if "calcification" in findings:
        _paint_fleck_cluster(vol, rng, geo["lung_left"], baseline, granuloma_center)

    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, size=dims)
        # clipped at 3 sigma so documented per-voxel bounds hold exactly
        np.clip(noise, -3.0 * spec.noise_sigma, 3.0 * spec.noise_sigma, out=noise)
        vol += noise
    np.clip(vol, 0.0, 1.0, out=vol)

    return Volume3D(vol, Provenance.PHANTOM), spec.label()


def _paint_streaks(
    vol: np.ndarray,
    rng: np.random.Generator,
    geo: Mapping[str, tuple[np.ndarray, np.ndarray]],
    baseline: float,
) -> None:
    """Thin bright vertical bands inside each lung (fibrotic scarring)."""
    for lung in ("lung_left", "lung_right"):
        center, semi = geo[lung]
        count = int(rng.integers(STREAK_COUNT_RANGE[0], STREAK_COUNT_RANGE[1] + 1))
        for _ in range(count):
            f = rng.uniform(-0.4, 0.4, size=2)  # (depth, width) offsets
            d0 = center[0] + f[0] * 0.8 * semi[0]
            w0 = center[2] + f[1] * 0.8 * semi[2]
            h_lo = int(np.ceil(center[1] - 0.6 * semi[1]))
            h_hi = int(np.floor(center[1] + 0.6 * semi[1]))
            d, w = np.ogrid[: vol.shape[0], : vol.shape[2]]
            column = (d - d0) ** 2 + (w - w0) ** 2 <= 1.0
            vol[:, h_lo : h_hi + 1, :][
                np.broadcast_to(column[:, None, :], (vol.shape[0], h_hi + 1 - h_lo, vol.shape[2]))
            ] = baseline + STREAK_BRIGHTNESS


def _paint_fleck_cluster(
    vol: np.ndarray,
    rng: np.random.Generator,
    lung: tuple[np.ndarray, np.ndarray],
    baseline: float,
    avoid: Optional[np.ndarray],
) -> None:
    """Cluster of tiny bright flecks, kept apart from any granuloma."""
    center_l, semi = lung
    cluster_extent = FLECK_SPACING * np.sqrt(3.0) + FLECK_RADIUS
    for _ in range(500):
        center = _place_inside(rng, center_l, semi, cluster_extent + 1.0, h_zone="lower")
        if avoid is None or np.linalg.norm(center - avoid) >= cluster_extent + 9.0:
            break
    else:
        raise RuntimeError("could not place calcification cluster clear of granuloma")
    lattice = [
        np.array([i, j, k], dtype=float) * FLECK_SPACING
        for i in (-1, 0, 1)
        for j in (-1, 0, 1)
        for k in (-1, 0, 1)
    ]
    k = int(rng.integers(FLECK_COUNT_RANGE[0], FLECK_COUNT_RANGE[1] + 1))
    chosen = rng.choice(len(lattice), size=k, replace=False)
    for idx in chosen:
        _paint_sphere(vol, center + lattice[int(idx)], FLECK_RADIUS, baseline + CALCIFICATION_BRIGHTNESS)


def drr_project(volume: Volume3D, axis: ProjectionAxis = ProjectionAxis.PA) -> ImagePlane2D:
    """Mean-intensity projection of a volume along one axis.

    PA projects along depth (output H x W); lateral projects along width
    (output H x D). The mean keeps projected intensities in the voxel range
    regardless of depth.
    """
    axis = ProjectionAxis(axis)
    voxels = volume.voxels.astype(np.float64)
    if axis is ProjectionAxis.PA:
        plane = voxels.mean(axis=0)
    else:
        plane = voxels.mean(axis=2).T
    return ImagePlane2D(plane, bit_depth=16)


CORPUS_CLASSES: dict[str, tuple[frozenset[str], int]] = {
    "healthy": (frozenset({"none"}), 0),
    "granuloma": (frozenset({"granuloma"}), 0),
    "cavitation": (frozenset({"cavitation"}), 0),
    "calcification": (frozenset({"calcification"}), 0),
    "sequelae": (frozenset({"calcification"}), 1),
}

DEFAULT_CLASS_MIX: dict[str, float] = {
    "healthy": 0.4,
    "granuloma": 0.15,
    "cavitation": 0.15,
    "calcification": 0.15,
    "sequelae": 0.15,
}


def build_phantom_corpus(
    n: int,
    class_mix: Optional[Mapping[str, float]] = None,
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    out_dir: Path | str = "phantom_corpus",
    dims: tuple[int, int, int] = (64, 128, 128),
    noise_sigma: float = 0.01,
) -> Path:
    """Write n phantoms (volume + PA/lateral projections) and their manifest.

    Class counts follow class_mix by largest-remainder rounding; splits are
    stratified by class at split_ratios. Every output byte is a pure function
    of the arguments.
    """
    if n <= 0:
        raise ValueError(f"corpus size must be positive, got {n}")
    mix = dict(DEFAULT_CLASS_MIX if class_mix is None else class_mix)
    unknown = set(mix) - set(CORPUS_CLASSES)
    if unknown:
        raise ValueError(f"unknown corpus class(es) {sorted(unknown)}")
    if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ValueError(f"class mix must be non-negative and sum to 1, got {mix}")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {split_ratios}")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)

    class_order = [c for c in CORPUS_CLASSES if c in mix]
    counts = largest_remainder_counts(n, [mix[c] for c in class_order])

    class_of: list[str] = []
    for cls, count in zip(class_order, counts):
        class_of.extend([cls] * count)
    splits = stratified_splits(class_of, split_ratios, seed=seed)

    records: list[PatientRecord] = []
    for idx, (cls, split) in enumerate(zip(class_of, splits)):
        finding_set, sequelae = CORPUS_CLASSES[cls]
        record_seed = int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])
        spec = PhantomSpec(
            dims=dims,
            finding_set=finding_set,
            sequelae=sequelae,
            noise_sigma=noise_sigma,
            seed=record_seed,
        )
        volume, label = generate_phantom(spec)
        pid = f"ph{idx:04d}"
        pa = drr_project(volume, ProjectionAxis.PA)
        lateral = drr_project(volume, ProjectionAxis.LATERAL)
        save_image_16bit(pa.pixels, out_dir / "images" / f"{pid}_pa.png")
        save_image_16bit(lateral.pixels, out_dir / "images" / f"{pid}_l.png")
        write_volume(volume, out_dir / "volumes" / f"{pid}.vol")
        records.append(
            PatientRecord(
                patient_id=pid,
                pa_path=f"images/{pid}_pa.png",
                lateral_path=f"images/{pid}_l.png",
                label=label,
                split=split,
            )
        )
    return save_manifest(records, out_dir / "manifest.csv")
