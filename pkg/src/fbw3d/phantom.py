"""Procedural phantom dataset with an analytically known weight function.

Each case is a pair of ellipsoid "head" and "abdomen" volumes. The true
weight is additive: density * ellipsoid volume per site plus a linear
growth term in the scan-to-delivery interval. Head and abdomen sizes are
drawn independently, so mixing the head of one case with the abdomen of
another has a well-defined weight by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (
    CaseRecord,
    VolumeGrid,
    write_manifest,
    write_volume,
)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, growth, and texture parameters of a single case."""

    head_semiaxes_mm: tuple[float, float, float]
    abd_semiaxes_mm: tuple[float, float, float]
    growth_rate_g_per_day: float
    texture_seed: int
    # (foreground mean, background mean, speckle amplitude)
    intensity_params: tuple[float, float, float] = (0.8, 0.05, 0.2)

    def __post_init__(self):
        if any(a <= 0 for a in self.head_semiaxes_mm + self.abd_semiaxes_mm):
            raise ValueError("semiaxes must all be positive")
        if self.growth_rate_g_per_day < 0:
            raise ValueError("growth_rate must be >= 0")


@dataclass(frozen=True)
class PopulationParams:
    """Sampling ranges and densities for the synthetic cohort.

    Defaults are calibrated so the generated weights roughly match a
    term-pregnancy cohort (mean ~3.2 kg, std ~0.47 kg, clipped to the
    1000-4610 g range).
    """

    head_semiaxis_range_mm: tuple[float, float] = (33.0, 53.0)
    abd_semiaxis_range_mm: tuple[float, float] = (44.0, 67.0)
    density_head_g_per_cm3: float = 3.0
    density_abd_g_per_cm3: float = 3.0
    growth_rate_range_g_per_day: tuple[float, float] = (20.0, 60.0)
    foreground_mean: float = 0.8
    background_mean: float = 0.05
    speckle_amplitude: float = 0.2
    background_noise: float = 0.02
    weight_clip_g: tuple[float, float] = (1000.0, 4610.0)

    def __post_init__(self):
        for lo, hi in (
            self.head_semiaxis_range_mm,
            self.abd_semiaxis_range_mm,
            self.growth_rate_range_g_per_day,
        ):
            if lo > hi:
                raise ValueError(f"degenerate-inverted range ({lo}, {hi})")
        if self.density_head_g_per_cm3 <= 0 or self.density_abd_g_per_cm3 <= 0:
            raise ValueError("densities must be positive")


def ellipsoid_volume_cm3(semiaxes_mm: tuple[float, float, float]) -> float:
    a, b, c = semiaxes_mm
    return (4.0 / 3.0) * math.pi * a * b * c / 1000.0


def head_term_g(spec: PhantomSpec, pop: PopulationParams | None = None) -> float:
    pop = pop or PopulationParams()
    return pop.density_head_g_per_cm3 * ellipsoid_volume_cm3(spec.head_semiaxes_mm)


def abd_term_g(spec: PhantomSpec, pop: PopulationParams | None = None) -> float:
    pop = pop or PopulationParams()
    return pop.density_abd_g_per_cm3 * ellipsoid_volume_cm3(spec.abd_semiaxes_mm)


def true_weight(
    spec: PhantomSpec, interval_days: int, pop: PopulationParams | None = None
) -> float:
    """Analytic weight in grams: head term + abdomen term + growth term."""
    if interval_days not in (0, 1, 2, 3):
        raise ValueError(f"interval_days must be in 0..3, got {interval_days}")
    pop = pop or PopulationParams()
    return (
        head_term_g(spec, pop)
        + abd_term_g(spec, pop)
        + spec.growth_rate_g_per_day * interval_days
    )


def mixed_weight(
    head_spec: PhantomSpec,
    abd_spec: PhantomSpec,
    interval_days: int,
    growth_rate_g_per_day: float,
    pop: PopulationParams | None = None,
) -> float:
    """Weight of a synthetic case: head of one spec, abdomen of another."""
    pop = pop or PopulationParams()
    return (
        head_term_g(head_spec, pop)
        + abd_term_g(abd_spec, pop)
        + growth_rate_g_per_day * interval_days
    )


def sample_spec(rng_seed: int, pop: PopulationParams) -> PhantomSpec:
    """Draw a spec; head and abdomen sizes come from independent draws."""
    rng = np.random.default_rng(np.random.SeedSequence([0x5BEC, rng_seed]))
    head = tuple(rng.uniform(*pop.head_semiaxis_range_mm, size=3).tolist())
    abd = tuple(rng.uniform(*pop.abd_semiaxis_range_mm, size=3).tolist())
    rate = float(rng.uniform(*pop.growth_rate_range_g_per_day))
    texture_seed = int(rng.integers(0, 2**31 - 1))
    return PhantomSpec(
        head_semiaxes_mm=head,
        abd_semiaxes_mm=abd,
        growth_rate_g_per_day=rate,
        texture_seed=texture_seed,
        intensity_params=(
            pop.foreground_mean,
            pop.background_mean,
            pop.speckle_amplitude,
        ),
    )


def sample_spec_clipped(
    rng_seed: int, pop: PopulationParams, max_tries: int = 1000
) -> PhantomSpec:
    """Rejection-sample until the weight fits the clip range at every interval."""
    lo, hi = pop.weight_clip_g
    for attempt in range(max_tries):
        spec = sample_spec(rng_seed * max_tries + attempt, pop)
        w0 = true_weight(spec, 0, pop)
        w3 = true_weight(spec, 3, pop)
        if w0 >= lo and w3 <= hi:
            return spec
    raise RuntimeError(
        f"no spec within weight clip {pop.weight_clip_g} after {max_tries} tries"
    )


def rasterize(
    spec: PhantomSpec,
    site: str,
    spacing: tuple[float, float, float],
    dims: tuple[int, int, int],
    bg_noise: float = 0.02,
) -> VolumeGrid:
    """Render one site's ellipsoid into a centered volume.

    Inside voxels get the foreground mean with multiplicative speckle;
    outside voxels get the background mean with additive noise. Output is a
    pure function of (spec, site, spacing, dims).
    """
    if site not in ("head", "abd"):
        raise ValueError(f"site must be 'head' or 'abd', got {site!r}")
    semiaxes = spec.head_semiaxes_mm if site == "head" else spec.abd_semiaxes_mm
    fov = [n * s for n, s in zip(dims, spacing)]
    for axis, (ax, extent) in enumerate(zip(semiaxes, fov)):
        if 2 * ax > extent:
            raise ValueError(
                f"ellipsoid diameter {2 * ax:.1f} mm exceeds field of view "
                f"{extent:.1f} mm on axis {axis}"
            )
    fg_mean, bg_mean, speckle = spec.intensity_params
    coords = [
        (np.arange(n, dtype=np.float64) - (n - 1) / 2.0) * s
        for n, s in zip(dims, spacing)
    ]
    zz, yy, xx = np.meshgrid(*coords, indexing="ij", sparse=True)
    inside = (
        (zz / semiaxes[0]) ** 2 + (yy / semiaxes[1]) ** 2 + (xx / semiaxes[2]) ** 2
    ) <= 1.0
    rng = np.random.default_rng(
        np.random.SeedSequence([spec.texture_seed, 0 if site == "head" else 1])
    )
    vox = np.empty(dims, dtype=np.float32)
    vox[:] = bg_mean + bg_noise * rng.uniform(-1.0, 1.0, size=dims)
    fg = fg_mean * (1.0 + speckle * rng.uniform(-1.0, 1.0, size=dims))
    vox[inside] = fg[inside]
    return VolumeGrid(vox, spacing)


@dataclass(frozen=True)
class Biometrics:
    """Clinical-style measurements, all in millimeters."""

    hc_mm: float
    ac_mm: float
    bpd_mm: float
    fl_mm: float


def ramanujan_perimeter(a: float, b: float) -> float:
    """Ramanujan's second approximation to the ellipse perimeter."""
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1.0 + 3.0 * h / (10.0 + math.sqrt(4.0 - 3.0 * h)))


def biometrics(spec: PhantomSpec) -> Biometrics:
    """Derive HC/AC from cross-section perimeters, BPD from the head minor
    axis, and FL as a deterministic synthetic draw from the texture seed."""
    hd, hh, hw = spec.head_semiaxes_mm
    ad, ah, aw = spec.abd_semiaxes_mm
    hc = ramanujan_perimeter(hh, hw)
    ac = ramanujan_perimeter(ah, aw)
    bpd = 2.0 * min(spec.head_semiaxes_mm)
    fl_rng = np.random.default_rng(np.random.SeedSequence([spec.texture_seed, 2]))
    fl = float(fl_rng.uniform(55.0, 78.0))
    return Biometrics(hc_mm=hc, ac_mm=ac, bpd_mm=bpd, fl_mm=fl)


DEFAULT_DIMS = (64, 64, 64)
DEFAULT_SPACING = (2.5, 2.5, 2.5)


def generate_dataset(
    n_cases: int,
    seed: int,
    pop: PopulationParams,
    out_dir: str | Path,
    dims: tuple[int, int, int] = DEFAULT_DIMS,
    spacing: tuple[float, float, float] = DEFAULT_SPACING,
    split_counts: tuple[int, int, int] | None = None,
) -> Path:
    """Write ``n_cases`` phantom cases (volumes + manifest) under out_dir.

    Splits default to a 7:1:2 train/val/test partition assigned by a seeded
    shuffle. Each case's randomness derives from (seed, case index), so the
    output is byte-identical regardless of generation order.

    Returns the manifest path.
    """
    if n_cases < 10:
        raise ValueError(f"n_cases must be >= 10, got {n_cases}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(exist_ok=True)

    if split_counts is None:
        n_train = int(n_cases * 0.7)
        n_val = int(n_cases * 0.1)
        split_counts = (n_train, n_val, n_cases - n_train - n_val)
    if sum(split_counts) != n_cases:
        raise ValueError(f"split_counts {split_counts} do not sum to {n_cases}")

    split_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x517]))
    order = split_rng.permutation(n_cases)
    split_of = {}
    cursor = 0
    for name, count in zip(("train", "val", "test"), split_counts):
        for idx in order[cursor : cursor + count]:
            split_of[int(idx)] = name
        cursor += count

    records = []
    for i in range(n_cases):
        case_rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        spec_seed = int(case_rng.integers(0, 2**31 - 1))
        spec = sample_spec_clipped(spec_seed, pop)
        interval = int(case_rng.integers(0, 4))
        weight = true_weight(spec, interval, pop)
        case_id = f"phantom_{i:05d}"
        head = rasterize(spec, "head", spacing, dims, bg_noise=pop.background_noise)
        abd = rasterize(spec, "abd", spacing, dims, bg_noise=pop.background_noise)
        head_path = f"volumes/{case_id}_head.fbwv"
        abd_path = f"volumes/{case_id}_abd.fbwv"
        write_volume(head, out_dir / head_path)
        write_volume(abd, out_dir / abd_path)
        bio = biometrics(spec)
        records.append(
            CaseRecord(
                case_id=case_id,
                head_path=head_path,
                abdomen_path=abd_path,
                interval_days=interval,
                weight_g=weight,
                split=split_of[i],
                biometrics_mm={
                    "hc": bio.hc_mm,
                    "ac": bio.ac_mm,
                    "bpd": bio.bpd_mm,
                    "fl": bio.fl_mm,
                },
            )
        )
    manifest_path = out_dir / "manifest.json"
    write_manifest(records, manifest_path)
    return manifest_path
