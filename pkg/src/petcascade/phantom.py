"""Deterministic synthetic PET-like cases with voxel-exact ground truth.

Each case is a soft-edged elliptical "body" at a uniform background uptake,
a few large warm organs (confounders that never enter the mask), and 1..N
hot ellipsoidal tumors with a cosine intensity taper. A tumor with peak
amplitude A above background contributes

    A * 0.5 * (1 + cos(pi * rho / 2))   for rho < 2, else 0

where rho is the normalized ellipsoid radius, so the half-maximum surface
sits exactly at rho = 1. The ground-truth mask is the union of the rho < 1
ellipsoids, which makes it independent of noise and analytically checkable.

Tumor centers are confined to one axial band sized from
target_fg_slice_fraction, which keeps the foreground/background slice
imbalance near the configured target.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataio import BoundingBox, MaskVolume, SliceAnnotation, ValidationError, Volume3D

COHORTS = ("A", "B")

# connectivity structures fixed by convention: 26-neighborhood in 3D, 8 in 2D
_STRUCT_3D = np.ones((3, 3, 3), dtype=bool)
_STRUCT_2D = np.ones((3, 3), dtype=bool)


def _interval(value, name, kind=float):
    lo, hi = (kind(v) for v in value)
    if lo > hi:
        raise ValidationError(f"{name} is empty: ({lo}, {hi})")
    return lo, hi


@dataclass
class PhantomConfig:
    grid_dims: tuple[int, int, int] = (64, 96, 96)          # (depth, height, width)
    voxel_spacing_mm: tuple[float, float, float] = (4.0, 3.6, 3.6)
    tumor_count_range: tuple[int, int] = (1, 6)
    tumor_radius_range_mm: tuple[float, float] = (8.0, 16.0)
    organ_count_range: tuple[int, int] = (2, 5)
    background_uptake: float = 1.0
    organ_uptake_range: tuple[float, float] = (1.8, 3.2)
    tumor_uptake_range: tuple[float, float] = (4.0, 8.0)
    noise_sigma: float = 0.25
    target_fg_slice_fraction: float = 0.10

    def __post_init__(self):
        self.grid_dims = tuple(int(d) for d in self.grid_dims)
        if len(self.grid_dims) != 3 or any(d < 16 for d in self.grid_dims):
            raise ValidationError(f"grid_dims must be 3 values >= 16, got {self.grid_dims}")
        self.voxel_spacing_mm = tuple(float(s) for s in self.voxel_spacing_mm)
        if any(s <= 0 for s in self.voxel_spacing_mm):
            raise ValidationError("voxel_spacing_mm must be positive")
        lo, hi = _interval(self.tumor_count_range, "tumor_count_range", int)
        if lo < 1:
            raise ValidationError("tumor_count_range minimum must be >= 1")
        self.tumor_count_range = (lo, hi)
        self.tumor_radius_range_mm = _interval(self.tumor_radius_range_mm, "tumor_radius_range_mm")
        if self.tumor_radius_range_mm[0] <= 0:
            raise ValidationError("tumor radii must be positive")
        if self.tumor_radius_range_mm[0] < max(self.voxel_spacing_mm):
            raise ValidationError(
                "tumor_radius_range_mm minimum must cover at least one voxel "
                f"(max spacing {max(self.voxel_spacing_mm)} mm)"
            )
        lo, hi = _interval(self.organ_count_range, "organ_count_range", int)
        if lo < 0:
            raise ValidationError("organ_count_range minimum must be >= 0")
        self.organ_count_range = (lo, hi)
        self.background_uptake = float(self.background_uptake)
        if self.background_uptake <= 0:
            raise ValidationError("background_uptake must be positive")
        self.organ_uptake_range = _interval(self.organ_uptake_range, "organ_uptake_range")
        self.tumor_uptake_range = _interval(self.tumor_uptake_range, "tumor_uptake_range")
        if self.tumor_uptake_range[0] <= self.background_uptake:
            raise ValidationError("tumor_uptake_range must lie strictly above background_uptake")
        self.noise_sigma = float(self.noise_sigma)
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be nonnegative")
        self.target_fg_slice_fraction = float(self.target_fg_slice_fraction)
        if not 0.0 < self.target_fg_slice_fraction < 1.0:
            raise ValidationError("target_fg_slice_fraction must be in (0,1)")
        # a tumor of maximal radius must be placeable with its mask inside the grid
        r_vox = self._radius_vox(self.tumor_radius_range_mm[1])
        for r, dim, axis in zip(r_vox, self.grid_dims, "zyx"):
            if 2 * r >= dim - 2:
                raise ValidationError(
                    f"tumor radius {self.tumor_radius_range_mm[1]} mm does not fit the grid "
                    f"along {axis} (needs {2 * r:.1f} voxels of {dim})"
                )

    def _radius_vox(self, radius_mm: float) -> np.ndarray:
        return radius_mm / np.asarray(self.voxel_spacing_mm)


@dataclass
class PhantomCase:
    case_id: str
    cohort: str
    volume: Volume3D
    gt_mask: MaskVolume
    tumor_instances: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.cohort not in COHORTS:
            raise ValidationError(f"cohort must be one of {COHORTS}, got {self.cohort!r}")
        if self.volume.dims != self.gt_mask.dims:
            raise ValidationError(
                f"volume dims {self.volume.dims} != mask dims {self.gt_mask.dims}"
            )


@dataclass(frozen=True)
class _Blob:
    center_vox: np.ndarray                  # (z, y, x) float
    radii_vox: np.ndarray                   # per-axis nominal (half-max) radius
    amplitude: float


def _blob_field(blob: _Blob, dims: tuple[int, int, int], out: np.ndarray,
                mask: np.ndarray | None) -> None:
    """Add one cosine-taper ellipsoid to `out`; set mask voxels where rho < 1."""
    lo = np.maximum(np.floor(blob.center_vox - 2 * blob.radii_vox).astype(int), 0)
    hi = np.minimum(np.ceil(blob.center_vox + 2 * blob.radii_vox).astype(int) + 1, dims)
    if (lo >= hi).any():
        return
    zz, yy, xx = np.meshgrid(*(np.arange(lo[i], hi[i], dtype=np.float64) for i in range(3)),
                             indexing="ij")
    rho = np.sqrt(
        ((zz - blob.center_vox[0]) / blob.radii_vox[0]) ** 2
        + ((yy - blob.center_vox[1]) / blob.radii_vox[1]) ** 2
        + ((xx - blob.center_vox[2]) / blob.radii_vox[2]) ** 2
    )
    region = (slice(lo[0], hi[0]), slice(lo[1], hi[1]), slice(lo[2], hi[2]))
    contrib = np.where(rho < 2.0, blob.amplitude * 0.5 * (1.0 + np.cos(np.pi * rho / 2.0)), 0.0)
    out[region] += contrib.astype(np.float32)
    if mask is not None:
        # contribution > amplitude/2 is exactly rho < 1
        mask[region] |= rho < 1.0


def _body_profile(config: PhantomConfig) -> np.ndarray:
    """Soft elliptical body cross-section in (y, x), 1 inside, tapering to 0."""
    _, h, w = config.grid_dims
    y = (np.arange(h) - (h - 1) / 2.0) / (0.42 * h)
    x = (np.arange(w) - (w - 1) / 2.0) / (0.42 * w)
    r = np.sqrt(y[:, None] ** 2 + x[None, :] ** 2)
    edge = 0.12  # taper width in normalized radius
    prof = np.clip((1.0 + edge - r) / edge, 0.0, 1.0)
    return (0.5 - 0.5 * np.cos(np.pi * prof)).astype(np.float32)


def _sample_center(rng, dims, radii_vox, z_range, body_margin=0.75):
    """Center with the nominal ellipsoid inside the body and z-range."""
    d, h, w = dims
    cz = rng.uniform(z_range[0], z_range[1])
    max_y = max(body_margin * 0.42 * h - radii_vox[1], 1.0)
    max_x = max(body_margin * 0.42 * w - radii_vox[2], 1.0)
    cy = (h - 1) / 2.0 + rng.uniform(-max_y, max_y)
    cx = (w - 1) / 2.0 + rng.uniform(-max_x, max_x)
    return np.array([cz, cy, cx])


def case_seed_for(master_seed: int, cohort: str, index: int) -> int:
    """Stateless 64-bit per-case seed."""
    key = f"{master_seed}:{cohort}:{index}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def generate_case(config: PhantomConfig, case_seed: int, case_id: str, cohort: str) -> PhantomCase:
    """Pure function of (config, case_seed): volume, mask and instance table."""
    rng = np.random.Generator(np.random.PCG64(np.uint64(case_seed)))
    dims = config.grid_dims
    d = dims[0]
    spacing = np.asarray(config.voxel_spacing_mm)

    volume = np.zeros(dims, dtype=np.float32)
    volume += config.background_uptake * _body_profile(config)[None, :, :]

    # organs: larger, warm, never in the mask
    n_organs = int(rng.integers(config.organ_count_range[0], config.organ_count_range[1] + 1))
    r_lo, r_hi = config.tumor_radius_range_mm
    for _ in range(n_organs):
        factor = rng.uniform(1.8, 3.2)
        radii_mm = rng.uniform(r_lo, r_hi, size=3) * factor
        radii_vox = np.minimum(radii_mm / spacing, (np.asarray(dims) - 2) / 2.2)
        uptake = rng.uniform(*config.organ_uptake_range)
        center = _sample_center(rng, dims, radii_vox, (radii_vox[0], d - 1 - radii_vox[0]))
        _blob_field(_Blob(center, radii_vox, uptake - config.background_uptake),
                    dims, volume, mask=None)

    # tumors: confined to one axial band so the foreground slice fraction
    # tracks target_fg_slice_fraction
    n_tumors = int(rng.integers(config.tumor_count_range[0], config.tumor_count_range[1] + 1))
    radii_vox_all = [rng.uniform(r_lo, r_hi, size=3) / spacing for _ in range(n_tumors)]
    max_rz = max(r[0] for r in radii_vox_all)
    band = max(int(round(config.target_fg_slice_fraction * d)), int(np.ceil(2 * max_rz)) + 1)
    band = min(band, d)
    band_lo = float(rng.uniform(0, d - band))

    mask = np.zeros(dims, dtype=bool)
    centers: list[np.ndarray] = []
    for radii_vox in radii_vox_all:
        z_range = (band_lo + radii_vox[0], band_lo + band - radii_vox[0])
        if z_range[0] > z_range[1]:
            mid = band_lo + band / 2.0
            z_range = (mid, mid)
        center = None
        for _ in range(30):  # prefer non-overlapping placements, accept overlap after
            cand = _sample_center(rng, dims, radii_vox, z_range)
            ok = all(
                np.linalg.norm((cand - c) * spacing) >= 0.9 * (radii_vox.max() + rv.max()) * spacing.max()
                for c, rv in zip(centers, radii_vox_all)
            )
            center = cand
            if ok:
                break
        centers.append(center)
        uptake = rng.uniform(*config.tumor_uptake_range)
        _blob_field(_Blob(center, radii_vox, uptake - config.background_uptake),
                    dims, volume, mask=mask)

    if config.noise_sigma > 0:
        volume += rng.normal(0.0, config.noise_sigma, size=dims).astype(np.float32)

    if not mask.any():
        raise ValidationError(
            f"case {case_id}: generated mask is empty (radii too small for the grid)"
        )
    labels, n_components = ndimage.label(mask, structure=_STRUCT_3D)
    counts = np.bincount(labels.ravel())[1:]
    instances = [(int(i + 1), int(c)) for i, c in enumerate(counts)]

    return PhantomCase(
        case_id=case_id,
        cohort=cohort,
        volume=Volume3D(volume, config.voxel_spacing_mm),
        gt_mask=MaskVolume(mask.astype(np.uint8)),
        tumor_instances=instances,
    )


def generate_cohort(config: PhantomConfig, n_cases: int, cohort: str,
                    master_seed: int) -> list[PhantomCase]:
    """n_cases independent cases named <cohort>-000.., stable order."""
    if n_cases < 1:
        raise ValidationError("n_cases must be >= 1")
    cases = []
    for i in range(n_cases):
        case_id = f"{cohort}-{i:03d}"
        cases.append(generate_case(config, case_seed_for(master_seed, cohort, i), case_id, cohort))
    return cases


def derive_slice_annotations(gt_mask: MaskVolume) -> list[SliceAnnotation]:
    """Per-slice labels and tight boxes around 8-connected 2D components."""
    voxels = gt_mask.voxels
    annotations = []
    for z in range(voxels.shape[0]):
        plane = voxels[z]
        boxes: list[BoundingBox] = []
        if plane.any():
            labels, n = ndimage.label(plane, structure=_STRUCT_2D)
            objects = ndimage.find_objects(labels)
            for sl in objects:
                ys, xs = sl
                boxes.append(BoundingBox(int(xs.start), int(ys.start), int(xs.stop), int(ys.stop)))
            boxes.sort(key=lambda b: b.as_tuple())
        label = "foreground" if boxes else "background"
        annotations.append(SliceAnnotation(z, label, tuple(boxes)))
    return annotations
