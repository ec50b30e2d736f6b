"""Experiment configuration, read from a TOML file.

```toml
seed = 0
output_dir = "runs/smoke"

[preprocess]
target_size = 64

[[datasets]]
name = "t2_bright"
source = "synthetic"
modality = "T2like"
[datasets.lesion]
polarity = "bright"
radius_px = 5
intensity_offset = 3.0

[[detectors]]
name = "vae-128"
kind = "vae"
input_size = 32
```
"""

import hashlib
import json
import logging
import tomllib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

from .data import SUPPORTED_SIZES, LesionSpec, Modality, Polarity
from .errors import ConfigError
from .evaluation import DIFFERENCE_GRID, PROBABILITY_GRID, GridSpec
from .preprocess import PreprocessConfig

log = logging.getLogger("anomaly_bench.config")

SOURCES = ("synthetic", "nifti")


def _check_keys(table: dict, allowed: set[str], where: str):
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"Unknown keys in {where}: {', '.join(sorted(unknown))}")


def _build(cls, table: Any, where: str):
    if not isinstance(table, dict):
        raise ConfigError(f"{where} must be a table")
    _check_keys(table, set(cls.__dataclass_fields__), where)
    try:
        return cls(**table)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid {where}: {e}") from e


@dataclass(frozen=True)
class LesionConfig:
    polarity: Polarity = Polarity.BRIGHT
    radius_px: int = 5
    intensity_offset: float = 3.0
    softness: float = 0.3
    count: int = 1

    def __post_init__(self):
        self.spec()

    def spec(self) -> LesionSpec:
        return LesionSpec(Polarity(self.polarity), self.radius_px, self.intensity_offset, self.softness, self.count)


@dataclass(frozen=True)
class VolumeConfig:
    image: str
    mask: Optional[str] = None
    labels: Optional[str] = None


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    source: str = "synthetic"
    modality: Modality = Modality.T2LIKE
    size: int = 64
    n_train: int = 200
    n_val: int = 20
    n_test: int = 40
    n_labeled: int = 100
    lesion: LesionConfig = LesionConfig()
    train_volumes: tuple[VolumeConfig, ...] = ()
    test_volumes: tuple[VolumeConfig, ...] = ()
    labeled_volumes: tuple[VolumeConfig, ...] = ()
    slice_range: Optional[tuple[int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        if self.source not in SOURCES:
            raise ConfigError(f"Dataset {self.name}: source must be one of {SOURCES}, got {self.source!r}")
        if self.source == "synthetic":
            if self.size not in SUPPORTED_SIZES:
                raise ConfigError(f"Dataset {self.name}: synthetic size must be one of {SUPPORTED_SIZES}")
            if min(self.n_train, self.n_test) < 1 or min(self.n_val, self.n_labeled) < 0:
                raise ConfigError(f"Dataset {self.name}: slice counts must be positive")
        elif not self.train_volumes or not self.test_volumes:
            raise ConfigError(f"Dataset {self.name}: nifti datasets need train_volumes and test_volumes")
        if any(v.labels is None for v in self.test_volumes + self.labeled_volumes):
            raise ConfigError(f"Dataset {self.name}: every test and labeled volume needs labels")
        if self.slice_range is not None:
            object.__setattr__(self, "slice_range", tuple(self.slice_range))

    @classmethod
    def from_table(cls, table: dict, where: str) -> "DatasetConfig":
        table = dict(table)
        if "lesion" in table:
            table["lesion"] = _build(LesionConfig, table["lesion"], f"{where}.lesion")
        for key in ("train_volumes", "test_volumes", "labeled_volumes"):
            if key in table:
                table[key] = tuple(_build(VolumeConfig, v, f"{where}.{key}") for v in table[key])
        return _build(cls, table, where)


@dataclass(frozen=True)
class DetectorConfig:
    """One metrics row; everything beyond name, kind and input_size is handed to the detector."""

    name: str
    kind: str
    input_size: Optional[int] = None
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "input_size": self.input_size, "options": self.options}


@dataclass(frozen=True)
class GridConfig:
    difference: GridSpec = DIFFERENCE_GRID
    probability: GridSpec = PROBABILITY_GRID
    supervised_threshold: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    datasets: tuple[DatasetConfig, ...]
    detectors: tuple[DetectorConfig, ...]
    preprocess: PreprocessConfig = PreprocessConfig()
    grids: GridConfig = GridConfig()
    output_dir: str = "runs/default"
    progress: bool = False
    threads: int = 1

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["detectors"] = [d.to_dict() for d in self.detectors]
        payload.pop("output_dir")
        payload.pop("progress")
        return payload

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()

    def dataset(self, name: str) -> DatasetConfig:
        for d in self.datasets:
            if d.name == name:
                return d
        raise ConfigError(f"No dataset named {name!r}")

    def with_overrides(
        self,
        seed: Optional[int] = None,
        output_dir: Optional[str] = None,
        detectors: Optional[list[str]] = None,
    ) -> "ExperimentConfig":
        changes: dict[str, Any] = {}
        if seed is not None:
            changes["seed"] = seed
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        if detectors:
            known = {d.name: d for d in self.detectors}
            missing = [name for name in detectors if name not in known]
            if missing:
                raise ConfigError(f"Unknown detectors {missing}; configured: {sorted(known)}")
            changes["detectors"] = tuple(known[name] for name in detectors)
        return replace(self, **changes)


def _grid(table: Any, default: GridSpec, where: str) -> GridSpec:
    if table is None:
        return default
    grid = _build(GridSpec, table, where)
    if grid.points < 1 or grid.stop < grid.start:
        raise ConfigError(f"{where} must have points >= 1 and stop >= start")
    return grid


def _detector(table: Any, where: str) -> DetectorConfig:
    from .detectors import REGISTRY

    if not isinstance(table, dict):
        raise ConfigError(f"{where} must be a table")
    table = dict(table)
    try:
        name = str(table.pop("name"))
        kind = str(table.pop("kind"))
    except KeyError as e:
        raise ConfigError(f"{where} needs {e.args[0]!r}") from e
    if kind not in REGISTRY:
        raise ConfigError(f"{where}: unknown detector kind {kind!r}, known: {sorted(REGISTRY)}")
    input_size = table.pop("input_size", None)
    # unknown option keys are rejected here, not at training time
    REGISTRY[kind].check_options(table, where)
    return DetectorConfig(name, kind, None if input_size is None else int(input_size), table)


def parse_config(payload: dict) -> ExperimentConfig:
    _check_keys(
        payload,
        {"seed", "datasets", "detectors", "preprocess", "grids", "output_dir", "progress", "threads"},
        "experiment",
    )
    if "seed" not in payload:
        raise ConfigError("Experiment config needs an explicit seed")
    if not isinstance(payload["seed"], int):
        raise ConfigError(f"seed must be an integer, got {payload['seed']!r}")
    datasets = tuple(
        DatasetConfig.from_table(t, f"datasets[{i}]") for i, t in enumerate(payload.get("datasets", []))
    )
    detectors = tuple(_detector(t, f"detectors[{i}]") for i, t in enumerate(payload.get("detectors", [])))
    if not datasets:
        raise ConfigError("Experiment config lists no datasets")
    if not detectors:
        raise ConfigError("Experiment config lists no detectors")
    for label, names in (("dataset", [d.name for d in datasets]), ("detector", [d.name for d in detectors])):
        if len(set(names)) != len(names):
            raise ConfigError(f"Duplicate {label} names in {names}")

    grids = payload.get("grids", {})
    _check_keys(grids, {"difference", "probability", "supervised_threshold"}, "grids")
    return ExperimentConfig(
        seed=payload["seed"],
        datasets=datasets,
        detectors=detectors,
        preprocess=_build(PreprocessConfig, payload.get("preprocess", {}), "preprocess"),
        grids=GridConfig(
            difference=_grid(grids.get("difference"), DIFFERENCE_GRID, "grids.difference"),
            probability=_grid(grids.get("probability"), PROBABILITY_GRID, "grids.probability"),
            supervised_threshold=float(grids.get("supervised_threshold", 0.5)),
        ),
        output_dir=str(payload.get("output_dir", "runs/default")),
        progress=bool(payload.get("progress", False)),
        threads=int(payload.get("threads", 1)),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as f:
            payload = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file {path} does not exist") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid TOML: {e}") from e
    config = parse_config(payload)
    log.info(f"Loaded {path}: {len(config.datasets)} datasets, {len(config.detectors)} detectors")
    return config
