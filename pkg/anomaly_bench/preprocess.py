"""Normalization pipeline.

remove_empty -> crop(max_bounding_box) -> remove_degenerate -> normalize -> resize_nearest.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .data import GroundTruth, Slice
from .errors import ConfigError, DegenerateSliceError, EmptyDatasetError, ValidationError

log = logging.getLogger("anomaly_bench.preprocess")


@dataclass(frozen=True)
class BoundingBox:
    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        if not (0 <= self.row_min < self.row_max and 0 <= self.col_min < self.col_max):
            raise ValidationError(f"Empty or inverted bounding box {self}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.row_max - self.row_min, self.col_max - self.col_min

    def apply(self, array: np.ndarray) -> np.ndarray:
        return array[self.row_min:self.row_max, self.col_min:self.col_max]


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: int = 64
    min_mask_pixels: int = 1

    def __post_init__(self):
        if self.target_size <= 0:
            raise ConfigError(f"target_size must be positive, got {self.target_size}")
        if self.min_mask_pixels < 0:
            raise ConfigError(f"min_mask_pixels must be non-negative, got {self.min_mask_pixels}")


def remove_empty(slices: Sequence[Slice], min_mask_pixels: int = 1) -> list[Slice]:
    kept = [s for s in slices if s.mask_pixels >= min_mask_pixels]
    if not kept:
        raise EmptyDatasetError(f"All {len(slices)} slices have fewer than {min_mask_pixels} brain pixels")
    if len(kept) < len(slices):
        log.info(f"Removed {len(slices) - len(kept)} empty slices")
    return kept


def max_bounding_box(dataset: Sequence[Slice]) -> BoundingBox:
    """Smallest box holding the union of every mask in ``dataset``."""
    if not dataset:
        raise EmptyDatasetError("Cannot compute a bounding box over an empty dataset")
    shape = dataset[0].shape
    union = np.zeros(shape, dtype=bool)
    for s in dataset:
        if s.shape != shape:
            raise ValidationError(f"Slice {s} has shape {s.shape}, dataset uses {shape}")
        union |= s.mask
    if not union.any():
        raise EmptyDatasetError("No slice in the dataset has a brain pixel")
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    return BoundingBox(int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)


def crop(slice: Slice, box: BoundingBox) -> Slice:
    return slice.replace(pixels=box.apply(slice.pixels).copy(), mask=box.apply(slice.mask).copy())


def crop_labels(ground_truth: GroundTruth, box: BoundingBox) -> GroundTruth:
    return GroundTruth(box.apply(ground_truth.labels).copy())


def is_normalizable(slice: Slice) -> bool:
    """True when ``normalize`` can z-score the slice: two brain pixels and some spread."""
    if slice.mask_pixels < 2:
        return False
    return bool(slice.pixels[slice.mask].astype(np.float64).std() > 0.0)


def remove_degenerate(slices: Sequence[Slice]) -> list[Slice]:
    kept = []
    for s in slices:
        if is_normalizable(s):
            kept.append(s)
        else:
            log.warning(f"Dropping {s}: fewer than 2 brain pixels or constant intensity")
    if not kept:
        raise EmptyDatasetError(f"None of {len(slices)} slices can be normalized")
    return kept


def normalize(slice: Slice) -> Slice:
    """Z-score inside the mask (population variance); background set to 0."""
    if slice.mask_pixels < 2:
        raise DegenerateSliceError(f"{slice} has {slice.mask_pixels} brain pixels, need at least 2")
    values = slice.pixels[slice.mask].astype(np.float64)
    mean = values.mean()
    std = values.std()
    if std == 0.0:
        raise DegenerateSliceError(f"{slice} has constant intensity inside its mask")
    pixels = np.zeros(slice.shape, dtype=np.float64)
    pixels[slice.mask] = (values - mean) / std
    return slice.replace(pixels=pixels)


def _nearest_indices(source: int, target: int) -> np.ndarray:
    # output i reads input floor(i * source / target)
    return (np.arange(target, dtype=np.int64) * source) // target


def _resize_array(array: np.ndarray, target: int) -> np.ndarray:
    rows = _nearest_indices(array.shape[0], target)
    cols = _nearest_indices(array.shape[1], target)
    return array[np.ix_(rows, cols)]


def resize_nearest(slice: Slice, target: int) -> Slice:
    if target <= 0:
        raise ConfigError(f"Resize target must be positive, got {target}")
    return slice.replace(pixels=_resize_array(slice.pixels, target), mask=_resize_array(slice.mask, target))


def resize_labels(ground_truth: GroundTruth, target: int) -> GroundTruth:
    return GroundTruth(_resize_array(ground_truth.labels, target))


def resize_map(scores: np.ndarray, target: int) -> np.ndarray:
    return _resize_array(scores, target)


def fingerprint(config: PreprocessConfig, box: BoundingBox) -> str:
    payload = json.dumps({"config": asdict(config), "box": asdict(box)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def preprocess_dataset(
    slices: Sequence[Slice],
    config: PreprocessConfig,
    box: Optional[BoundingBox] = None,
) -> tuple[list[Slice], BoundingBox, str]:
    """Run the pipeline in its fixed order; ``box`` lets several splits share one boundary.

    Slices that cannot be normalized after cropping are dropped with a warning.
    """
    kept = remove_empty(slices, config.min_mask_pixels)
    if box is None:
        box = max_bounding_box(kept)
    cropped = remove_degenerate([crop(s, box) for s in kept])
    processed = [resize_nearest(normalize(s), config.target_size) for s in cropped]
    digest = fingerprint(config, box)
    log.info(f"Preprocessed {len(processed)} slices, box {box.shape}, target {config.target_size}")
    return processed, box, digest
