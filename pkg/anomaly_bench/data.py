"""Slices, the synthetic phantom generator, lesion injection and the raster slice store.

Store layout for one slice named ``<id>``::

    <id>.f32          little-endian float32 pixels, row-major
    <id>.mask.u8      uint8 brain mask (0/1), row-major
    <id>.labels.u8    uint8 ground truth, only for labelled slices
    <id>.json         sidecar: shape, dtype, modality, subject_id, slice_index, file names
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import nibabel as nib
from nibabel.filebasedimages import ImageFileError
import numpy as np
from scipy.ndimage import binary_erosion, gaussian_filter

from .errors import (
    ConfigError,
    IngestionError,
    IntegrityError,
    PlacementError,
    ValidationError,
)

log = logging.getLogger("anomaly_bench.data")

SUPPORTED_SIZES = (32, 64, 128, 256)
# Measured on the generator: brain area / image area stays in this range for every size.
MASK_FRACTION_BOUNDS = (0.3, 0.8)
RASTER_DTYPE = np.dtype("<f4")
MAX_PLACEMENT_RETRIES = 50

# Radii (in units of the deformed ellipse) where the outer, middle and inner regions end.
REGION_RADII = (1.0, 0.7, 0.35)
SEMI_AXES = (0.40, 0.32)
AXIS_JITTER = 0.04
DEFORMATION = 0.03


class Modality(str, Enum):
    T1LIKE = "T1like"
    T2LIKE = "T2like"


class Polarity(str, Enum):
    BRIGHT = "bright"
    DARK = "dark"


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class TissueComponent:
    name: str
    mean: float
    subject_spread: float
    noise: float


# Component order matches the region labels: 0 outer, 1 middle, 2 inner.
TISSUE_COMPONENTS = {
    Modality.T1LIKE: (
        TissueComponent("gray", 0.60, 0.02, 0.04),
        TissueComponent("white", 0.90, 0.02, 0.04),
        TissueComponent("fluid", 0.25, 0.02, 0.04),
    ),
    Modality.T2LIKE: (
        TissueComponent("gray", 1.00, 0.02, 0.04),
        TissueComponent("white", 0.70, 0.02, 0.04),
        TissueComponent("fluid", 1.80, 0.02, 0.04),
    ),
}


@dataclass(eq=False)
class Slice:
    pixels: np.ndarray
    mask: np.ndarray
    modality: Modality
    subject_id: str
    slice_index: int = 0

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        self.modality = Modality(self.modality)
        if self.pixels.ndim != 2:
            raise ValidationError(f"Slice pixels must be 2D, got shape {self.pixels.shape}")
        if self.pixels.shape != self.mask.shape:
            raise ValidationError(
                f"Slice pixels {self.pixels.shape} and mask {self.mask.shape} differ in shape"
            )
        if not np.isfinite(self.pixels).all():
            raise ValidationError(f"Slice {self} contains NaN or Inf pixels")

    def __str__(self):
        return f"{self.subject_id}[{self.slice_index}]"

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def mask_pixels(self) -> int:
        return int(self.mask.sum())

    def replace(self, **changes) -> "Slice":
        return dataclasses.replace(self, **changes)


@dataclass(eq=False)
class GroundTruth:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=bool)
        if self.labels.ndim != 2:
            raise ValidationError(f"Ground truth must be 2D, got shape {self.labels.shape}")
        if self.labels.size and self.labels.all():
            raise ValidationError("Ground truth marks every pixel abnormal")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(eq=False)
class Volume:
    slices: list[Slice]
    affine: np.ndarray

    def __len__(self):
        return len(self.slices)


@dataclass(frozen=True)
class LesionSpec:
    polarity: Polarity
    radius_px: int
    intensity_offset: float
    softness: float = 0.3
    count: int = 1

    def __post_init__(self):
        object.__setattr__(self, "polarity", Polarity(self.polarity))
        if int(self.radius_px) != self.radius_px or self.radius_px <= 0:
            raise ConfigError(f"radius_px must be a positive integer, got {self.radius_px}")
        if not 0.0 <= self.softness <= 1.0:
            raise ConfigError(f"softness must lie in [0, 1], got {self.softness}")
        if self.count < 1:
            raise ConfigError(f"count must be at least 1, got {self.count}")
        # zero offset is allowed for both polarities: geometry without contrast
        if self.polarity is Polarity.BRIGHT and self.intensity_offset < 0:
            raise ConfigError("bright lesions need a non-negative intensity_offset")
        if self.polarity is Polarity.DARK and self.intensity_offset > 0:
            raise ConfigError("dark lesions need a non-positive intensity_offset")


@dataclass(eq=False)
class Phantom:
    slice: Slice
    regions: np.ndarray


# --------------------------------------------------------------------------- ingestion


def _load_image(path: Path):
    try:
        return nib.load(str(path))
    except FileNotFoundError as e:
        raise IngestionError(path, "file not found") from e
    except (OSError, ImageFileError, ValueError) as e:
        raise IngestionError(path, str(e)) from e


def _as_3d(data: np.ndarray, path: Path) -> np.ndarray:
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise IngestionError(path, f"expected a 3D volume, got {data.ndim} dimensions")
    return data


def load_volume(
    path,
    mask_path=None,
    modality: Modality = Modality.T1LIKE,
    slice_range: Optional[tuple[int, int]] = None,
    subject_id: Optional[str] = None,
) -> Volume:
    """Read a NIfTI volume into axial slices (last array axis) in acquisition order.

    Without ``mask_path`` the brain mask is the nonzero-intensity support.
    """
    path = Path(path)
    image = _load_image(path)
    try:
        data = _as_3d(np.asarray(image.get_fdata(dtype=np.float32)), path)
    except (OSError, ValueError) as e:
        raise IngestionError(path, str(e)) from e
    data = np.nan_to_num(data, nan=0.0, posinf=0.0, neginf=0.0)

    if mask_path is not None:
        mask_path = Path(mask_path)
        mask_image = _load_image(mask_path)
        mask = _as_3d(np.asarray(mask_image.get_fdata(dtype=np.float32)), mask_path) > 0
        if mask.shape != data.shape:
            raise ValidationError(
                f"Mask {mask_path} has shape {mask.shape}, volume {path} has shape {data.shape}"
            )
    else:
        mask = data != 0

    if subject_id is None:
        subject_id = path.name.split(".")[0]
    start, stop = slice_range if slice_range is not None else (0, data.shape[2])
    slices = [
        Slice(data[:, :, k], mask[:, :, k], modality, subject_id, k)
        for k in range(max(start, 0), min(stop, data.shape[2]))
    ]
    log.info(f"Loaded {len(slices)} slices from {path}")
    return Volume(slices=slices, affine=np.asarray(image.affine))


def load_labels(path, slice_range: Optional[tuple[int, int]] = None) -> list[np.ndarray]:
    """Lesion segmentation volume as per-slice boolean maps (nonzero = abnormal)."""
    path = Path(path)
    data = _as_3d(np.asarray(_load_image(path).get_fdata(dtype=np.float32)), path) > 0
    start, stop = slice_range if slice_range is not None else (0, data.shape[2])
    return [data[:, :, k] for k in range(max(start, 0), min(stop, data.shape[2]))]


# --------------------------------------------------------------------------- synthesis


def _phantom(rng: np.random.Generator, size: int, modality: Modality, subject_id: str, index: int) -> Phantom:
    coords = np.arange(size) + 0.5 - size / 2
    rows, cols = np.meshgrid(coords, coords, indexing="ij")
    a = SEMI_AXES[0] * size * (1 + rng.uniform(-AXIS_JITTER, AXIS_JITTER))
    b = SEMI_AXES[1] * size * (1 + rng.uniform(-AXIS_JITTER, AXIS_JITTER))
    radius = np.hypot(rows / a, cols / b)

    warp = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8, mode="wrap")
    warp /= np.abs(warp).max()
    radius = radius * (1.0 + DEFORMATION * warp)

    regions = np.full((size, size), -1, dtype=np.int8)
    for label, limit in enumerate(REGION_RADII):
        regions[radius < limit] = label
    mask = regions >= 0

    components = TISSUE_COMPONENTS[modality]
    means = np.array([c.mean + rng.normal(0.0, c.subject_spread) for c in components])
    noise = np.array([c.noise for c in components])
    texture = gaussian_filter(rng.standard_normal((size, size)), sigma=1.0)
    texture /= texture.std()

    pixels = np.zeros((size, size), dtype=np.float64)
    inside = regions[mask]
    pixels[mask] = means[inside] + noise[inside] * texture[mask]
    return Phantom(Slice(pixels, mask, modality, subject_id, index), regions)


def generate_phantoms(seed: int, n: int, size: int, modality: Modality) -> list[Phantom]:
    """Healthy pseudo-anatomy with its region labels (-1 outside, 0/1/2 tissue regions)."""
    if size not in SUPPORTED_SIZES:
        raise ConfigError(f"Unsupported slice size {size}; choose one of {SUPPORTED_SIZES}")
    if n < 1:
        raise ConfigError(f"Need at least one slice, got n={n}")
    modality = Modality(modality)
    children = np.random.SeedSequence(seed).spawn(n)
    return [
        _phantom(np.random.default_rng(child), size, modality, f"synth-{seed}-{i:05d}", i)
        for i, child in enumerate(children)
    ]


def generate_healthy(seed: int, n: int, size: int, modality: Modality) -> list[Slice]:
    return [phantom.slice for phantom in generate_phantoms(seed, n, size, modality)]


def _soft_disk(shape: tuple[int, int], centre: np.ndarray, radius: float, width: float) -> np.ndarray:
    rows, cols = np.indices(shape)
    distance = np.hypot(rows - centre[0], cols - centre[1])
    if width == 0:
        return (distance <= radius).astype(np.float64)
    return np.clip((radius + width - distance) / (2 * width), 0.0, 1.0)


def _disk_footprint(radius: float) -> np.ndarray:
    reach = int(np.ceil(radius))
    rows, cols = np.indices((2 * reach + 1, 2 * reach + 1)) - reach
    return np.hypot(rows, cols) <= radius


def inject_lesion(slice: Slice, spec: LesionSpec, seed: int) -> tuple[Slice, GroundTruth]:
    """Add ``spec.count`` soft disks of ``spec.intensity_offset`` inside the brain mask.

    Operates in the slice's current units. Ground truth is the soft profile above 0.5.
    """
    rng = np.random.default_rng(seed)
    width = spec.softness * spec.radius_px
    candidates = binary_erosion(slice.mask, structure=_disk_footprint(spec.radius_px + width), border_value=0)
    centres = np.argwhere(candidates)
    if len(centres) == 0:
        raise PlacementError(f"A lesion of radius {spec.radius_px} does not fit inside the mask of {slice}")

    profile = np.zeros(slice.shape, dtype=np.float64)
    for _ in range(spec.count):
        for _attempt in range(MAX_PLACEMENT_RETRIES):
            blob = _soft_disk(slice.shape, centres[rng.integers(len(centres))], spec.radius_px, width)
            if not np.any((blob > 0) & (profile > 0)):
                break
        else:
            raise PlacementError(
                f"No non-overlapping placement for {spec.count} lesions in {slice} "
                f"after {MAX_PLACEMENT_RETRIES} retries"
            )
        profile = np.maximum(profile, blob)
    profile[~slice.mask] = 0.0

    pixels = slice.pixels + (spec.intensity_offset * profile).astype(np.float32)
    return slice.replace(pixels=pixels), GroundTruth(profile > 0.5)


def inject_lesions(slices: Sequence[Slice], spec: LesionSpec, seed: int) -> list[tuple[Slice, GroundTruth]]:
    seeds = np.random.SeedSequence(seed).generate_state(len(slices))
    return [inject_lesion(s, spec, int(child)) for s, child in zip(slices, seeds)]


# --------------------------------------------------------------------------- raster store


def _read_sidecar(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise IntegrityError(f"Sidecar {path} is missing") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise IntegrityError(f"Sidecar {path} is not valid JSON: {e}") from e


def _read_bytes(path: Path, expected: int) -> bytes:
    try:
        payload = path.read_bytes()
    except FileNotFoundError as e:
        raise IntegrityError(f"Raster {path} is missing") from e
    if len(payload) != expected:
        raise IntegrityError(f"Raster {path} holds {len(payload)} bytes, sidecar implies {expected}")
    return payload


def _sidecar_shape(meta: dict, path: Path) -> tuple[int, ...]:
    try:
        shape = tuple(int(d) for d in meta["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise IntegrityError(f"Sidecar {path} has no valid shape") from e
    if any(d < 0 for d in shape):
        raise IntegrityError(f"Sidecar {path} has a negative dimension in {shape}")
    return shape


def write_array(stem, array: np.ndarray, metadata: Optional[dict] = None) -> Path:
    """Write ``<stem>.f32`` and ``<stem>.json``; returns the sidecar path."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    raster = np.ascontiguousarray(array, dtype=RASTER_DTYPE)
    raster_path = Path(f"{stem}.f32")
    raster_path.write_bytes(raster.tobytes(order="C"))
    sidecar = {"shape": list(raster.shape), "dtype": RASTER_DTYPE.str, "raster_file": raster_path.name}
    sidecar.update(metadata or {})
    sidecar_path = Path(f"{stem}.json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar_path


def read_array(sidecar_path) -> tuple[np.ndarray, dict]:
    sidecar_path = Path(sidecar_path)
    meta = _read_sidecar(sidecar_path)
    shape = _sidecar_shape(meta, sidecar_path)
    raster_file = meta.get("raster_file", sidecar_path.with_suffix(".f32").name)
    payload = _read_bytes(sidecar_path.parent / raster_file, int(np.prod(shape, dtype=np.int64)) * 4)
    array = np.frombuffer(payload, dtype=RASTER_DTYPE).reshape(shape).astype(np.float32)
    return array, meta


def _write_bits(path: Path, bits: np.ndarray):
    path.write_bytes(np.ascontiguousarray(bits, dtype=np.uint8).tobytes(order="C"))


def _read_bits(path: Path, shape: tuple[int, int]) -> np.ndarray:
    payload = _read_bytes(path, int(np.prod(shape)))
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape) != 0


def slice_name(slice: Slice) -> str:
    return f"{slice.subject_id}_{slice.slice_index:04d}"


def store_slice(directory, slice: Slice, ground_truth: Optional[GroundTruth] = None, name: Optional[str] = None) -> Path:
    directory = Path(directory)
    name = name or slice_name(slice)
    metadata = {
        "modality": slice.modality.value,
        "subject_id": slice.subject_id,
        "slice_index": int(slice.slice_index),
        "mask_file": f"{name}.mask.u8",
    }
    if ground_truth is not None:
        if ground_truth.shape != slice.shape:
            raise ValidationError(f"Ground truth {ground_truth.shape} does not match slice {slice.shape}")
        metadata["labels_file"] = f"{name}.labels.u8"
    sidecar = write_array(directory / name, slice.pixels, metadata)
    _write_bits(directory / metadata["mask_file"], slice.mask)
    if ground_truth is not None:
        _write_bits(directory / metadata["labels_file"], ground_truth.labels)
    return sidecar


def read_slice(sidecar_path) -> Slice:
    sidecar_path = Path(sidecar_path)
    pixels, meta = read_array(sidecar_path)
    if pixels.ndim != 2:
        raise IntegrityError(f"Slice sidecar {sidecar_path} declares {pixels.ndim} dimensions")
    try:
        mask = _read_bits(sidecar_path.parent / meta["mask_file"], pixels.shape)
        return Slice(pixels, mask, Modality(meta["modality"]), str(meta["subject_id"]), int(meta["slice_index"]))
    except (KeyError, ValueError) as e:
        raise IntegrityError(f"Slice sidecar {sidecar_path} is incomplete: {e}") from e


def read_ground_truth(sidecar_path) -> Optional[GroundTruth]:
    sidecar_path = Path(sidecar_path)
    meta = _read_sidecar(sidecar_path)
    if "labels_file" not in meta:
        return None
    shape = _sidecar_shape(meta, sidecar_path)
    return GroundTruth(_read_bits(sidecar_path.parent / meta["labels_file"], shape))


# --------------------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    slice_index: int
    path: str
    modality: Modality
    has_ground_truth: bool = False


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: Split
    preprocessing_fingerprint: str = ""
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        self.split = Split(self.split)
        modalities = {Modality(e.modality) for e in self.entries}
        if len(modalities) > 1:
            raise ValidationError(f"Manifest mixes modalities {sorted(m.value for m in modalities)}")

    def __len__(self):
        return len(self.entries)

    def __str__(self):
        return f"{self.split.value} manifest ({len(self.entries)} slices)"

    @property
    def modality(self) -> Optional[Modality]:
        return Modality(self.entries[0].modality) if self.entries else None

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load_slices(self) -> list[Slice]:
        return [read_slice(self.resolve(e)) for e in self.entries]

    def load_ground_truth(self) -> list[Optional[GroundTruth]]:
        return [read_ground_truth(self.resolve(e)) if e.has_ground_truth else None for e in self.entries]


def write_manifest(path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "split": manifest.split.value,
        "modality": manifest.modality.value if manifest.modality else None,
        "preprocessing_fingerprint": manifest.preprocessing_fingerprint,
        "entries": [
            {
                "subject_id": e.subject_id,
                "slice_index": e.slice_index,
                "path": e.path,
                "modality": Modality(e.modality).value,
                "has_ground_truth": e.has_ground_truth,
            }
            for e in manifest.entries
        ],
    }
    path.write_text(json.dumps(payload, indent=2))
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    payload = _read_sidecar(path)
    try:
        entries = [
            ManifestEntry(
                subject_id=str(e["subject_id"]),
                slice_index=int(e["slice_index"]),
                path=str(e["path"]),
                modality=Modality(e["modality"]),
                has_ground_truth=bool(e.get("has_ground_truth", False)),
            )
            for e in payload["entries"]
        ]
        manifest = DatasetManifest(
            entries=entries,
            split=Split(payload["split"]),
            preprocessing_fingerprint=payload.get("preprocessing_fingerprint", ""),
            root=path.parent,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise IntegrityError(f"Manifest {path} is malformed: {e}") from e
    missing = [e.path for e in manifest.entries if not manifest.resolve(e).is_file()]
    if missing:
        raise IntegrityError(f"Manifest {path} references {len(missing)} missing slices, first {missing[0]}")
    return manifest


def store_dataset(
    directory,
    slices: Sequence[Slice],
    split: Split,
    fingerprint: str = "",
    ground_truths: Optional[Iterable[Optional[GroundTruth]]] = None,
) -> DatasetManifest:
    """Write every slice (and its labels) under ``directory`` plus ``manifest.json``."""
    directory = Path(directory)
    labels = list(ground_truths) if ground_truths is not None else [None] * len(slices)
    entries = []
    for i, (s, gt) in enumerate(zip(slices, labels)):
        name = f"{i:05d}_{slice_name(s)}"
        sidecar = store_slice(directory, s, gt, name=name)
        entries.append(ManifestEntry(s.subject_id, s.slice_index, sidecar.name, s.modality, gt is not None))
    manifest = DatasetManifest(entries, Split(split), fingerprint, root=directory)
    write_manifest(directory / "manifest.json", manifest)
    log.info(f"Stored {manifest} under {directory}")
    return manifest
