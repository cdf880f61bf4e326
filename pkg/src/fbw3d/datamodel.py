"""Core domain records, weight normalization, input assembly, resizing, and file I/O.

A case is a pair of 3D ultrasound volumes (head, abdomen) plus the
scan-to-delivery interval in days and, for labeled cases, the true birth
weight in grams. The network consumes five-channel volumes: the image plus
three constant spacing planes (mm) and one constant normalized-interval
plane.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

VOLUME_MAGIC = b"FBWV"
VOLUME_VERSION = 1

VALID_INTERVALS = (0, 1, 2, 3)
VALID_SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class VolumeGrid:
    """A 3D scalar image with per-axis physical spacing in mm per voxel.

    ``voxels`` has shape (D, H, W), float32; ``spacing`` is (depth, height,
    width) in millimeters.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ValueError(f"voxels must be a 3D array, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise ValueError("voxels contain non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class FetalCase:
    """Paired head/abdomen volumes with interval and optional label."""

    head: VolumeGrid
    abdomen: VolumeGrid
    interval_days: int
    weight_g: float | None
    case_id: str

    def __post_init__(self):
        if self.interval_days not in VALID_INTERVALS:
            raise ValueError(
                f"interval_days must be in {VALID_INTERVALS}, got {self.interval_days}"
            )
        if self.weight_g is not None and self.weight_g <= 0:
            raise ValueError(f"weight_g must be positive, got {self.weight_g}")


@dataclass(frozen=True)
class WeightNormalizer:
    """Bijective min-max map [w_min, w_max] grams <-> [0, 1].

    Bounds are fixed per deployment and persisted inside checkpoints so a
    sigmoid output always denormalizes to the same gram scale.
    """

    w_min: float = 0.0
    w_max: float = 5000.0

    def __post_init__(self):
        if not self.w_min < self.w_max:
            raise ValueError(f"w_min ({self.w_min}) must be < w_max ({self.w_max})")

    def normalize(self, weight_g: float) -> float:
        if weight_g < self.w_min:
            raise ValueError(f"weight {weight_g} g below lower bound {self.w_min} g")
        if weight_g > self.w_max:
            raise ValueError(f"weight {weight_g} g above upper bound {self.w_max} g")
        return (weight_g - self.w_min) / (self.w_max - self.w_min)

    def denormalize(self, y: float) -> float:
        return self.w_min + y * (self.w_max - self.w_min)


def normalize_weight(weight_g: float, normalizer: WeightNormalizer) -> float:
    return normalizer.normalize(weight_g)


def assemble_input(volume: VolumeGrid, interval_days: int) -> np.ndarray:
    """Build the five-channel model input of shape (5, D, H, W).

    Channel 0 is the image; channels 1-3 are constant planes holding the
    spacing components in mm; channel 4 is constant at interval_days / 3.
    """
    if interval_days not in VALID_INTERVALS:
        raise ValueError(
            f"interval_days must be in {VALID_INTERVALS}, got {interval_days}"
        )
    d, h, w = volume.shape
    out = np.empty((5, d, h, w), dtype=np.float32)
    out[0] = volume.voxels
    for axis in range(3):
        out[1 + axis] = volume.spacing[axis]
    out[4] = interval_days / 3.0
    return out


def resize_volume(volume: VolumeGrid, target: tuple[int, int, int]) -> VolumeGrid:
    """Resize to ``target`` dims with a single isotropic scale, then zero-pad.

    The scale factor is f = min over axes of target/source, applied with
    trilinear interpolation; the result is centered in a zero background.
    Output spacing is source spacing / f, so physical content extent is
    preserved.
    """
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < 1 for t in target):
        raise ValueError(f"target dims must be >= 1, got {target}")
    src = volume.shape
    f = min(t / s for t, s in zip(target, src))
    if f == 1.0 and src == target:
        scaled = volume.voxels
    else:
        scaled = ndimage.zoom(volume.voxels, f, order=1, mode="grid-constant",
                              cval=0.0, grid_mode=True, prefilter=False)
    scaled = scaled[tuple(slice(0, t) for t in target)]
    out = np.zeros(target, dtype=np.float32)
    before = [(t - n) // 2 for t, n in zip(target, scaled.shape)]
    out[tuple(slice(b, b + n) for b, n in zip(before, scaled.shape))] = scaled
    spacing = tuple(s / f for s in volume.spacing)
    return VolumeGrid(out, spacing)


def write_volume(volume: VolumeGrid, path: str | Path) -> None:
    """Write the bit-exact binary volume format.

    Layout: magic "FBWV", u32 version, u32 D/H/W, three f32 LE spacings,
    then D*H*W f32 LE voxels in row-major order.
    """
    path = Path(path)
    d, h, w = volume.shape
    header = VOLUME_MAGIC + struct.pack(
        "<IIIIfff", VOLUME_VERSION, d, h, w, *volume.spacing
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> VolumeGrid:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != VOLUME_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
        version, d, h, w, sd, sh, sw = struct.unpack("<IIIIfff", fh.read(28))
        if version != VOLUME_VERSION:
            raise ValueError(f"{path}: unsupported volume version {version}")
        raw = fh.read(d * h * w * 4)
    voxels = np.frombuffer(raw, dtype="<f4").reshape(d, h, w).astype(np.float32)
    return VolumeGrid(voxels, (sd, sh, sw))


@dataclass(frozen=True)
class CaseRecord:
    """One manifest entry; paths are relative to the manifest directory."""

    case_id: str
    head_path: str
    abdomen_path: str
    interval_days: int
    weight_g: float | None
    split: str
    biometrics_mm: dict | None = field(default=None)

    def __post_init__(self):
        if self.split not in VALID_SPLITS:
            raise ValueError(f"split must be one of {VALID_SPLITS}, got {self.split}")
        if self.interval_days not in VALID_INTERVALS:
            raise ValueError(f"interval_days out of range: {self.interval_days}")


def write_manifest(records: list[CaseRecord], path: str | Path) -> None:
    rows = []
    for r in records:
        row = {
            "case_id": r.case_id,
            "head_path": r.head_path,
            "abdomen_path": r.abdomen_path,
            "interval_days": r.interval_days,
            "weight_g": r.weight_g,
            "split": r.split,
        }
        if r.biometrics_mm is not None:
            row["biometrics_mm"] = r.biometrics_mm
        rows.append(row)
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")


def read_manifest(path: str | Path) -> list[CaseRecord]:
    rows = json.loads(Path(path).read_text())
    return [
        CaseRecord(
            case_id=row["case_id"],
            head_path=row["head_path"],
            abdomen_path=row["abdomen_path"],
            interval_days=row["interval_days"],
            weight_g=row["weight_g"],
            split=row["split"],
            biometrics_mm=row.get("biometrics_mm"),
        )
        for row in rows
    ]


def load_case(record: CaseRecord, root: str | Path) -> FetalCase:
    root = Path(root)
    return FetalCase(
        head=read_volume(root / record.head_path),
        abdomen=read_volume(root / record.abdomen_path),
        interval_days=record.interval_days,
        weight_g=record.weight_g,
        case_id=record.case_id,
    )
