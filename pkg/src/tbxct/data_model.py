"""Dataset schema, manifest I/O, cohort filtering and per-patient view selection.

The on-disk contract is a UTF-8 CSV manifest with the exact header

    patient_id,pa_path,l_path,tb,sequelae,granuloma,cavitation,calcification,split

where image paths are relative to the manifest location and may be empty
(missing view). All record types are immutable after construction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

MANIFEST_HEADER = (
    "patient_id",
    "pa_path",
    "l_path",
    "tb",
    "sequelae",
    "granuloma",
    "cavitation",
    "calcification",
    "split",
)

TYPE_NAMES = ("granuloma", "cavitation", "calcification")


class ManifestError(ValueError):
    """Raised when a manifest file violates the schema or label invariants."""


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Task(str, Enum):
    IDENTIFICATION = "identification"
    SEQUELAE = "sequelae"
    TYPES = "types"


class ViewModality(str, Enum):
    PA = "pa"
    PA_L = "pa_l"


class Provenance(str, Enum):
    PHANTOM = "phantom"
    GENERATED_SV = "generated_sv"
    GENERATED_B = "generated_b"
    EXTERNAL = "external"


@dataclass(frozen=True)
class DiseaseLabel:
    """Binary TB flag, sequelae flag, and the three finding-type flags.

    Type flags are not mutually exclusive; a healthy record (tb=0) must carry
    no findings at all.
    """

    tb: int
    sequelae: int
    granuloma: int
    cavitation: int
    calcification: int

    def __post_init__(self) -> None:
        for name in ("tb", "sequelae") + TYPE_NAMES:
            value = getattr(self, name)
            if value not in (0, 1):
                raise ValueError(f"label field {name!r} must be 0 or 1, got {value!r}")
        if self.tb == 0 and (self.sequelae or any(self.types)):
            raise ValueError(
                "label inconsistency: tb=0 record carries sequelae or finding flags"
            )

    @property
    def types(self) -> tuple[int, int, int]:
        return (self.granuloma, self.cavitation, self.calcification)

    @property
    def healthy(self) -> bool:
        return self.tb == 0


@dataclass(frozen=True)
class PatientRecord:
    """One subject: optional PA/lateral image paths, label and split assignment.

    Paths are kept verbatim as written in the manifest (relative to it);
    resolve against the manifest directory before loading pixels.
    """

    patient_id: str
    pa_path: Optional[str]
    lateral_path: Optional[str]
    label: DiseaseLabel
    split: Split

    def __post_init__(self) -> None:
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if self.pa_path is None and self.lateral_path is None:
            raise ValueError(
                f"record {self.patient_id!r} has neither a PA nor a lateral image"
            )


class ImagePlane2D:
    """A 2D grayscale image: finite pixel grid plus its source bit depth.

    Pixels are stored as float64 in [0, 1] (scaled by the source bit depth)
    and frozen after construction.
    """

    __slots__ = ("pixels", "bit_depth")

    def __init__(self, pixels: np.ndarray, bit_depth: int = 16):
        arr = np.asarray(pixels, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"image must be 2D, got shape {arr.shape}")
        if arr.size == 0:
            raise ValueError("image must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite pixels")
        arr = arr.copy()
        arr.flags.writeable = False
        self.pixels = arr
        self.bit_depth = int(bit_depth)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


class Volume3D:
    """A D x H x W voxel grid with its provenance fixed at creation."""

    __slots__ = ("voxels", "provenance")

    def __init__(self, voxels: np.ndarray, provenance: Provenance):
        arr = np.asarray(voxels, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite voxels")
        arr = arr.copy()
        arr.flags.writeable = False
        self.voxels = arr
        self.provenance = Provenance(provenance)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class CohortSplit:
    """Task-filtered train/val/test record lists, disjoint by patient_id."""

    task: Task
    train: tuple[PatientRecord, ...]
    val: tuple[PatientRecord, ...]
    test: tuple[PatientRecord, ...]

    @property
    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.val), len(self.test))


def _parse_binary(value: str, row_num: int, field: str) -> int:
    if value == "0":
        return 0
    if value == "1":
        return 1
    raise ManifestError(f"row {row_num}: field {field!r} must be 0 or 1, got {value!r}")


def load_manifest(path: Path | str) -> list[PatientRecord]:
    """Parse a manifest CSV into validated PatientRecords.

    Fails fast on malformed rows (naming row number and offending field),
    duplicate patient ids, and labels violating the healthy-consistency
    invariant. Empty path fields become absent-view markers.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records: list[PatientRecord] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if tuple(header) != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}: bad header {header!r}, expected {','.join(MANIFEST_HEADER)}"
            )
        for row_num, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(
                    f"row {row_num}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}"
                )
            patient_id = row[0].strip()
            if not patient_id:
                raise ManifestError(f"row {row_num}: field 'patient_id' is empty")
            if patient_id in seen:
                raise ManifestError(f"row {row_num}: duplicate patient_id {patient_id!r}")
            seen.add(patient_id)
            pa_path = row[1].strip() or None
            lateral_path = row[2].strip() or None
            if pa_path is None and lateral_path is None:
                raise ManifestError(f"row {row_num}: record has no image paths")
            flags = [
                _parse_binary(row[i].strip(), row_num, MANIFEST_HEADER[i])
                for i in range(3, 8)
            ]
            try:
                label = DiseaseLabel(*flags)
            except ValueError as exc:
                raise ManifestError(f"row {row_num}: {exc}") from None
            try:
                split = Split(row[8].strip())
            except ValueError:
                raise ManifestError(
                    f"row {row_num}: field 'split' must be train/val/test, got {row[8]!r}"
                ) from None
            records.append(PatientRecord(patient_id, pa_path, lateral_path, label, split))
    return records


def save_manifest(records: Sequence[PatientRecord], path: Path | str) -> Path:
    """Write records back to CSV, inverse of load_manifest field-for-field."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in records:
            writer.writerow(
                [
                    rec.patient_id,
                    rec.pa_path or "",
                    rec.lateral_path or "",
                    rec.label.tb,
                    rec.label.sequelae,
                    rec.label.granuloma,
                    rec.label.cavitation,
                    rec.label.calcification,
                    rec.split.value,
                ]
            )
    return path


def task_predicate(task: Task, label: DiseaseLabel) -> bool:
    """Membership rule deciding whether a record belongs to a task's cohort."""
    if task is Task.IDENTIFICATION:
        return True  # every record is either healthy or TB
    if task is Task.SEQUELAE:
        return label.tb == 1
    if task is Task.TYPES:
        return any(label.types)
    raise ValueError(f"unknown task {task!r}")


def filter_cohort(records: Sequence[PatientRecord], task: Task) -> CohortSplit:
    """Filter records to a task's cohort, keeping manifest split membership."""
    task = Task(task)
    buckets: dict[Split, list[PatientRecord]] = {s: [] for s in Split}
    for rec in records:
        if task_predicate(task, rec.label):
            buckets[rec.split].append(rec)
    for split, bucket in buckets.items():
        if not bucket:
            raise ValueError(f"cohort empty for task {task.value!r} (split {split.value!r})")
    return CohortSplit(
        task=task,
        train=tuple(buckets[Split.TRAIN]),
        val=tuple(buckets[Split.VAL]),
        test=tuple(buckets[Split.TEST]),
    )


def select_views(
    record: PatientRecord,
    modality: ViewModality,
    rng: Optional[np.random.Generator] = None,
    image_root: Path | str | None = None,
) -> tuple[ImagePlane2D, ...]:
    """Pick the view(s) a modality needs and load them from image_root.

    PA mode returns the PA image when present; otherwise a uniformly random
    choice among the available images (requires rng). PA_L returns the
    (pa, lateral) pair and errors if either view is missing.
    """
    modality = ViewModality(modality)
    root = Path(image_root) if image_root is not None else Path(".")
    if modality is ViewModality.PA_L:
        if record.pa_path is None or record.lateral_path is None:
            raise ValueError(f"view unavailable: record {record.patient_id!r} lacks a view pair")
        return (load_image(root / record.pa_path), load_image(root / record.lateral_path))
    if record.pa_path is not None:
        return (load_image(root / record.pa_path),)
    available = [p for p in (record.pa_path, record.lateral_path) if p is not None]
    if rng is None:
        raise ValueError("rng required to pick among non-PA views")
    choice = available[int(rng.integers(len(available)))]
    return (load_image(root / choice),)


def stratified_splits(
    class_keys: Sequence, ratios: tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> list[Split]:
    """Assign train/val/test per record, stratified by class key.

    Within each class the ratios are turned into counts by largest-remainder
    rounding, then records are shuffled (seeded) and dealt out. Deterministic
    given (class_keys, ratios, seed).
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17]))
    out: list[Optional[Split]] = [None] * len(class_keys)
    by_class: dict = {}
    for idx, key in enumerate(class_keys):
        by_class.setdefault(key, []).append(idx)
    for key in sorted(by_class, key=repr):
        indices = np.array(by_class[key])
        rng.shuffle(indices)
        counts = largest_remainder_counts(len(indices), ratios)
        cursor = 0
        for split, count in zip(Split, counts):
            for idx in indices[cursor : cursor + count]:
                out[int(idx)] = split
            cursor += count
    assert all(s is not None for s in out)
    return out  # type: ignore[return-value]


def largest_remainder_counts(n: int, proportions: Sequence[float]) -> list[int]:
    """Split n into integer counts matching proportions (largest remainder)."""
    quotas = [n * p for p in proportions]
    counts = [int(np.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    remainders = sorted(
        range(len(quotas)), key=lambda i: (quotas[i] - counts[i], -i), reverse=True
    )
    for i in remainders[:leftover]:
        counts[i] += 1
    return counts


# --- image and volume file I/O -------------------------------------------------

def load_image(path: Path | str) -> ImagePlane2D:
    """Load an 8- or 16-bit grayscale PNG, scaling pixels to [0, 1]."""
    path = Path(path)
    with Image.open(path) as im:
        if im.mode == "L":
            return ImagePlane2D(np.asarray(im, dtype=np.float64) / 255.0, bit_depth=8)
        if im.mode in ("I;16", "I"):
            return ImagePlane2D(np.asarray(im, dtype=np.float64) / 65535.0, bit_depth=16)
        return ImagePlane2D(
            np.asarray(im.convert("L"), dtype=np.float64) / 255.0, bit_depth=8
        )


def save_image_16bit(pixels: np.ndarray, path: Path | str) -> Path:
    """Write a [0, 1] pixel grid as a 16-bit grayscale PNG (scaled by 65535)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    arr16 = np.round(arr * 65535.0).astype("<u2")
    Image.fromarray(arr16, mode="I;16").save(path)
    return path


def write_volume(volume: Volume3D, path: Path | str) -> Path:
    """Write a volume as raw little-endian float32 (depth-major) + JSON sidecar."""
    path = Path(path)
    if path.suffix != ".vol":
        path = path.with_suffix(".vol")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(volume.voxels.astype("<f4").tobytes(order="C"))
    sidecar = {"dims": list(volume.dims), "provenance": volume.provenance.value}
    Path(str(path) + ".json").write_text(json.dumps(sidecar) + "\n", encoding="utf-8")
    return path


def read_volume(path: Path | str) -> Volume3D:
    """Read a .vol/.vol.json pair back into a Volume3D."""
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.exists() or not sidecar_path.exists():
        raise FileNotFoundError(f"volume files missing: {path}(.json)")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    dims = tuple(int(d) for d in sidecar["dims"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise ValueError(
            f"{path}: voxel count {raw.size} does not match dims {dims}"
        )
    return Volume3D(raw.reshape(dims), Provenance(sidecar["provenance"]))
