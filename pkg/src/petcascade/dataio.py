"""On-disk formats for volumes, masks, annotations and dataset manifests.

A case is stored as five files sharing the case id as stem:

    <case_id>.vol.json   header: dims, spacing, dtype, byte order, cohort
    <case_id>.vol.raw    float32 little-endian raster, z-major then y then x
    <case_id>.mask.json  header: dims, dtype uint8, tumor instance table
    <case_id>.mask.raw   uint8 raster, same axis order
    <case_id>.ann.json   per-slice labels and tight bounding boxes

All JSON is UTF-8 with sorted keys so identical inputs produce byte-identical
files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "valid", "test")
DEFAULT_SPLIT_RATIOS = (0.6, 0.2, 0.2)


class ValidationError(ValueError):
    """A value violates a documented contract."""


class DataIOError(Exception):
    """Base class for case-file problems."""


class MissingCaseFileError(DataIOError):
    """A referenced case file does not exist."""


class HeaderMismatchError(DataIOError):
    """Raster payload does not match its JSON header (size, dtype, dims)."""


class NonBinaryMaskError(DataIOError):
    """Mask raster contains values other than 0 and 1."""


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")


@dataclass
class Volume3D:
    """3D intensity grid with physical voxel spacing (z, y, x order)."""

    voxels: np.ndarray                      # (depth, height, width) float32
    voxel_spacing_mm: tuple[float, float, float]

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValidationError(f"volume must be 3D, got shape {self.voxels.shape}")
        if not np.isfinite(self.voxels).all():
            raise ValidationError("volume contains non-finite voxels")
        self.voxel_spacing_mm = tuple(float(s) for s in self.voxel_spacing_mm)
        if len(self.voxel_spacing_mm) != 3 or any(s <= 0 for s in self.voxel_spacing_mm):
            raise ValidationError(f"voxel spacing must be 3 positive reals, got {self.voxel_spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class MaskVolume:
    """Binary ground-truth grid aligned with a Volume3D."""

    voxels: np.ndarray                      # (depth, height, width) uint8 in {0,1}

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValidationError(f"mask must be 3D, got shape {self.voxels.shape}")
        vals = np.unique(self.voxels)
        if not np.isin(vals, (0, 1)).all():
            raise NonBinaryMaskError(f"mask values outside {{0,1}}: {vals[:8]}")
        self.voxels = self.voxels.astype(np.uint8)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned 2D box, half-open: [x_min, x_max) x [y_min, y_max)."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                raise ValidationError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"degenerate box {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    def within(self, height: int, width: int) -> bool:
        return 0 <= self.x_min and self.x_max <= width and 0 <= self.y_min and self.y_max <= height


@dataclass(frozen=True)
class SliceAnnotation:
    """Foreground/background label plus tumor boxes for one axial slice."""

    slice_index: int
    label: str                              # "foreground" | "background"
    boxes: tuple[BoundingBox, ...]

    def __post_init__(self):
        if self.slice_index < 0:
            raise ValidationError("slice_index must be >= 0")
        if self.label not in ("foreground", "background"):
            raise ValidationError(f"unknown label {self.label!r}")
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if (self.label == "foreground") != (len(self.boxes) > 0):
            raise ValidationError("label must be foreground iff boxes nonempty")


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    cohort: str
    split: str
    files: dict[str, str]                   # role -> path relative to manifest root


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split_ratios: tuple[float, float, float]
    split_seed: int
    root: Path = field(default_factory=lambda: Path("."))

    def case_ids(self, split: str | None = None) -> list[str]:
        return [e.case_id for e in self.entries if split is None or e.split == split]

    def entries_for(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]

    def to_json_bytes(self) -> bytes:
        payload = {
            "format": "petcascade-manifest/1",
            "split_seed": int(self.split_seed),
            "split_ratios": list(self.split_ratios),
            "entries": [
                {"case_id": e.case_id, "cohort": e.cohort, "split": e.split, "files": e.files}
                for e in self.entries
            ],
        }
        return _json_bytes(payload)

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_json_bytes())
        return path

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise MissingCaseFileError(f"manifest not found: {path}")
        payload = json.loads(path.read_text(encoding="utf-8"))
        entries = [
            ManifestEntry(d["case_id"], d["cohort"], d["split"], dict(d["files"]))
            for d in payload["entries"]
        ]
        manifest = cls(
            entries=entries,
            split_ratios=tuple(payload["split_ratios"]),
            split_seed=int(payload["split_seed"]),
            root=path.parent,
        )
        ids = manifest.case_ids()
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate case_ids in manifest")
        for e in entries:
            for rel in e.files.values():
                if not (manifest.root / rel).exists():
                    raise MissingCaseFileError(f"manifest references missing file: {rel}")
        return manifest


# ---------------------------------------------------------------------------
# case read/write

CASE_FILE_ROLES = ("volume_header", "volume_raster", "mask_header", "mask_raster", "annotations")


def case_file_names(case_id: str) -> dict[str, str]:
    return {
        "volume_header": f"{case_id}.vol.json",
        "volume_raster": f"{case_id}.vol.raw",
        "mask_header": f"{case_id}.mask.json",
        "mask_raster": f"{case_id}.mask.raw",
        "annotations": f"{case_id}.ann.json",
    }


def _write_raster(path: Path, array: np.ndarray, dtype: str) -> None:
    path.write_bytes(np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def _read_raster(path: Path, dims: tuple[int, int, int], dtype: str) -> np.ndarray:
    if not path.exists():
        raise MissingCaseFileError(f"missing raster file: {path}")
    raw = path.read_bytes()
    dt = np.dtype(dtype).newbyteorder("<")
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise HeaderMismatchError(
            f"{path.name}: raster has {len(raw)} bytes, header dims {dims} require {expected}"
        )
    return np.frombuffer(raw, dtype=dt).reshape(dims).astype(dtype, copy=True)


def write_case(case, directory: Path) -> dict[str, Path]:
    """Persist a PhantomCase; returns the written file set keyed by role.

    Annotations are derived from the ground-truth mask at write time.
    """
    from .phantom import derive_slice_annotations  # local import to avoid a cycle

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = case_file_names(case.case_id)
    paths = {role: directory / name for role, name in names.items()}

    vol_header = {
        "format": "petcascade-volume/1",
        "case_id": case.case_id,
        "cohort": case.cohort,
        "dims": list(case.volume.dims),
        "voxel_spacing_mm": list(case.volume.voxel_spacing_mm),
        "dtype": "float32",
        "byte_order": "little",
        "axis_order": "zyx",
        "raster": names["volume_raster"],
    }
    mask_header = {
        "format": "petcascade-mask/1",
        "case_id": case.case_id,
        "dims": list(case.gt_mask.dims),
        "dtype": "uint8",
        "byte_order": "little",
        "axis_order": "zyx",
        "raster": names["mask_raster"],
        "tumor_instances": [[int(i), int(n)] for i, n in case.tumor_instances],
    }
    annotations = derive_slice_annotations(case.gt_mask)
    ann_payload = {
        "format": "petcascade-annotations/1",
        "case_id": case.case_id,
        "slices": [
            {
                "slice_index": a.slice_index,
                "label": a.label,
                "boxes": [list(b.as_tuple()) for b in a.boxes],
            }
            for a in annotations
        ],
    }

    paths["volume_header"].write_bytes(_json_bytes(vol_header))
    _write_raster(paths["volume_raster"], case.volume.voxels, "float32")
    paths["mask_header"].write_bytes(_json_bytes(mask_header))
    _write_raster(paths["mask_raster"], case.gt_mask.voxels, "uint8")
    paths["annotations"].write_bytes(_json_bytes(ann_payload))
    return paths


def _load_header(path: Path) -> dict:
    if not path.exists():
        raise MissingCaseFileError(f"missing header file: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def read_case(directory: Path, case_id: str):
    """Load a case written by write_case; bit-exact round trip."""
    from .phantom import PhantomCase

    directory = Path(directory)
    names = case_file_names(case_id)

    vol_header = _load_header(directory / names["volume_header"])
    dims = tuple(int(d) for d in vol_header["dims"])
    if len(dims) != 3:
        raise HeaderMismatchError(f"{case_id}: volume header dims {dims} are not 3D")
    voxels = _read_raster(directory / names["volume_raster"], dims, "float32")
    volume = Volume3D(voxels, tuple(vol_header["voxel_spacing_mm"]))

    mask_header = _load_header(directory / names["mask_header"])
    mdims = tuple(int(d) for d in mask_header["dims"])
    if mdims != dims:
        raise HeaderMismatchError(f"{case_id}: mask dims {mdims} != volume dims {dims}")
    mask_raw = _read_raster(directory / names["mask_raster"], mdims, "uint8")
    if (mask_raw > 1).any():
        raise NonBinaryMaskError(f"{case_id}: mask raster contains values > 1")
    gt_mask = MaskVolume(mask_raw)

    instances = [(int(i), int(n)) for i, n in mask_header.get("tumor_instances", [])]
    return PhantomCase(
        case_id=vol_header["case_id"],
        cohort=vol_header["cohort"],
        volume=volume,
        gt_mask=gt_mask,
        tumor_instances=instances,
    )


def read_annotations(directory: Path, case_id: str) -> list[SliceAnnotation]:
    payload = _load_header(Path(directory) / case_file_names(case_id)["annotations"])
    out = []
    for d in payload["slices"]:
        boxes = tuple(BoundingBox(*b) for b in d["boxes"])
        out.append(SliceAnnotation(int(d["slice_index"]), d["label"], boxes))
    return out


# ---------------------------------------------------------------------------
# splitting

def split_counts(n_cases: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor-based counts with leftover cases handed out train-first."""
    counts = [int(np.floor(r * n_cases)) for r in ratios]
    leftover = n_cases - sum(counts)
    i = 0
    while leftover > 0:
        counts[i % 3] += 1
        leftover -= 1
        i += 1
    return tuple(counts)


def split_dataset(
    case_ids: list[str],
    ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
    seed: int = 0,
    cohorts: dict[str, str] | None = None,
    root: Path = Path("."),
) -> DatasetManifest:
    """Assign whole cases to train/valid/test.

    The assignment is deterministic in (case_ids order, seed). Cohort tags
    default to the portion of the case id before the first dash.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError(f"ratios must be 3 nonnegative reals, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1 within 1e-9, got sum {sum(ratios)!r}")
    if len(set(case_ids)) != len(case_ids):
        raise ValidationError("case_ids must be unique")
    n_nonzero = sum(1 for r in ratios if r > 0)
    if len(case_ids) < n_nonzero:
        raise ValidationError(f"{len(case_ids)} cases cannot fill {n_nonzero} nonzero-ratio splits")

    rng = np.random.Generator(np.random.PCG64(seed))
    order = list(rng.permutation(len(case_ids)))
    counts = split_counts(len(case_ids), ratios)

    assignment: dict[str, str] = {}
    cursor = 0
    for split, count in zip(SPLITS, counts):
        for k in order[cursor:cursor + count]:
            assignment[case_ids[k]] = split
        cursor += count

    entries = []
    for cid in case_ids:  # manifest keeps the caller's case order
        cohort = cohorts[cid] if cohorts else cid.split("-")[0]
        entries.append(ManifestEntry(cid, cohort, assignment[cid], case_file_names(cid)))
    return DatasetManifest(entries=entries, split_ratios=ratios, split_seed=int(seed), root=Path(root))


def discover_case_ids(directory: Path) -> list[str]:
    """Case ids present in a directory, sorted, from their volume headers."""
    directory = Path(directory)
    return sorted(p.name[: -len(".vol.json")] for p in directory.glob("*.vol.json"))


# ---------------------------------------------------------------------------
# task datasets

@dataclass
class ClassificationSample:
    case_id: str
    slice_index: int
    image: np.ndarray                       # native-resolution 2D float32
    label: int                              # 1 foreground, 0 background


@dataclass
class DetectionSample:
    case_id: str
    slice_index: int
    image: np.ndarray
    boxes: tuple[BoundingBox, ...]


@dataclass
class SegmentationSample:
    case_id: str
    slice_index: int
    box: BoundingBox                        # ground-truth box
    effective_box: BoundingBox              # box expanded by margin, clipped
    image_patch: np.ndarray
    mask_patch: np.ndarray                  # uint8


TASKS = ("classification", "detection", "segmentation")


def assemble_task_dataset(
    manifest: DatasetManifest,
    split: str,
    task: str,
    roi_margin_px: int = 2,
):
    """Build the per-task sample list for one split, in deterministic order.

    classification: every axial slice with its binary label.
    detection: foreground slices only, with their ground-truth boxes.
    segmentation: one ROI sample per ground-truth box, cropped with margin.
    """
    from .preprocess import crop_roi

    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    entries = manifest.entries_for(split)

    samples = []
    for entry in entries:
        case = read_case(manifest.root, entry.case_id)
        annotations = read_annotations(manifest.root, entry.case_id)
        volume = case.volume.voxels
        mask = case.gt_mask.voxels
        for ann in annotations:
            image = volume[ann.slice_index]
            if task == "classification":
                samples.append(
                    ClassificationSample(entry.case_id, ann.slice_index, image,
                                         int(ann.label == "foreground"))
                )
            elif ann.label != "foreground":
                continue
            elif task == "detection":
                samples.append(DetectionSample(entry.case_id, ann.slice_index, image, ann.boxes))
            else:
                for box in ann.boxes:
                    img_patch, eff = crop_roi(image, box, roi_margin_px)
                    mask_patch, _ = crop_roi(mask[ann.slice_index], box, roi_margin_px)
                    samples.append(
                        SegmentationSample(entry.case_id, ann.slice_index, box, eff,
                                           img_patch, mask_patch)
                    )
    return samples
