"""Experiment orchestration.

Workspace layout under ``output_dir``::

    data/<dataset>/<split>/        raw slices + manifest.json
    prepared/<dataset>/<split>/    preprocessed slices (test/labeled carry lesions and labels)
    checkpoints/<dataset>/<detector>-<hash>/
    maps/<dataset>/<detector>/     one raster per test slice
    roc/<dataset>__<detector>.csv
    metrics.csv, metrics.json, report.json, plots/

Every stage reads its inputs from the workspace, so the CLI verbs can run one at a time.
"""

import hashlib
import json
import logging
import platform
import shutil
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import scipy
import sklearn
import torch
from tqdm import tqdm

from .config import DatasetConfig, DetectorConfig, ExperimentConfig
from .data import (
    GroundTruth,
    Slice,
    Split,
    generate_healthy,
    inject_lesions,
    load_labels,
    load_volume,
    read_array,
    read_manifest,
    read_slice,
    store_dataset,
    write_array,
)
from .detectors import Detector, create
from .errors import AnomalyBenchError, EmptyDatasetError, IntegrityError, UndefinedAUCError
from .evaluation import (
    DifferenceMap,
    MetricRow,
    auc,
    dice,
    max_dice_sweep,
    pool,
    roc,
    write_metrics,
    write_roc,
)
from .preprocess import (
    crop,
    crop_labels,
    is_normalizable,
    max_bounding_box,
    preprocess_dataset,
    resize_labels,
)

log = logging.getLogger("anomaly_bench.runner")

RAW_SPLITS = ("train", "val", "test", "labeled")
REPORT_FILE = "report.json"


def derive_seed(seed: int, *labels: str) -> int:
    digest = hashlib.sha256("/".join([str(seed), *labels]).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _digest(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


@dataclass(frozen=True)
class Workspace:
    root: Path

    def raw(self, dataset: str, split: str) -> Path:
        return self.root / "data" / dataset / split

    def prepared(self, dataset: str, split: str) -> Path:
        return self.root / "prepared" / dataset / split

    def checkpoint(self, dataset: str, detector: str, fingerprint: str) -> Path:
        return self.root / "checkpoints" / dataset / f"{detector}-{fingerprint[:12]}"

    def maps(self, dataset: str, detector: str) -> Path:
        return self.root / "maps" / dataset / detector

    def roc(self, dataset: str, detector: str) -> Path:
        return self.root / "roc" / f"{dataset}__{detector}.csv"

    @property
    def plots(self) -> Path:
        return self.root / "plots"


@dataclass
class FailureRecord:
    stage: str
    dataset: str
    detector: str
    error: str
    message: str

    def __str__(self):
        return f"{self.stage} {self.dataset}/{self.detector or '-'}: {self.error}: {self.message}"


@dataclass
class Report:
    root: Path
    config_hash: str = ""
    rows: list[MetricRow] = field(default_factory=list)
    failures: list[FailureRecord] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    roc_files: dict[str, str] = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    @property
    def workspace(self) -> Workspace:
        return Workspace(self.root)

    @property
    def ok(self) -> bool:
        return not self.failures

    def failed(self, dataset: str, detector: str = "") -> bool:
        return any(f.dataset == dataset and f.detector in ("", detector) for f in self.failures)

    def record(self, stage: str, dataset: str, detector: str, error: BaseException):
        failure = FailureRecord(stage, dataset, detector, type(error).__name__, str(error))
        log.warning(f"Recorded failure: {failure}")
        self.failures.append(failure)

    def save(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {
            "config_hash": self.config_hash,
            "rows": [asdict(r) for r in self.rows],
            "failures": [asdict(f) for f in self.failures],
            "checkpoints": self.checkpoints,
            "roc_files": self.roc_files,
            "environment": self.environment,
        }
        path = self.root / REPORT_FILE
        path.write_text(json.dumps(payload, indent=2))
        return path


def load_report(root) -> Report:
    root = Path(root)
    try:
        payload = json.loads((root / REPORT_FILE).read_text())
    except FileNotFoundError:
        return Report(root)
    except json.JSONDecodeError as e:
        raise IntegrityError(f"Report {root / REPORT_FILE} is not valid JSON: {e}") from e
    return Report(
        root=root,
        config_hash=payload.get("config_hash", ""),
        rows=[MetricRow(**r) for r in payload.get("rows", [])],
        failures=[FailureRecord(**f) for f in payload.get("failures", [])],
        checkpoints=payload.get("checkpoints", {}),
        roc_files=payload.get("roc_files", {}),
        environment=payload.get("environment", {}),
    )


def environment(config: ExperimentConfig) -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "torch": torch.__version__,
        "seed": config.seed,
        "config_hash": config.config_hash(),
    }


@contextmanager
def _guard(report: Report, stage: str, dataset: str, detector: str = ""):
    """One unit of work: a failure is recorded and the run continues."""
    try:
        yield
    except AnomalyBenchError as e:
        report.record(stage, dataset, detector, e)
    except Exception as e:
        log.exception(f"Unexpected error in {stage} {dataset}/{detector}")
        report.record(stage, dataset, detector, e)


# --------------------------------------------------------------------------- data


def _dataset_fingerprint(config: ExperimentConfig, dataset: DatasetConfig) -> str:
    return _digest({"seed": config.seed, "dataset": asdict(dataset)})


def _is_current(directory: Path, fingerprint: str) -> bool:
    try:
        return read_manifest(directory / "manifest.json").preprocessing_fingerprint == fingerprint
    except AnomalyBenchError:
        return False


def _synthetic_splits(config: ExperimentConfig, dataset: DatasetConfig) -> dict[str, list[Slice]]:
    counts = {"train": dataset.n_train, "val": dataset.n_val, "test": dataset.n_test, "labeled": dataset.n_labeled}
    return {
        split: generate_healthy(derive_seed(config.seed, dataset.name, split), n, dataset.size, dataset.modality) if n else []
        for split, n in counts.items()
    }


def _ingest(volumes, dataset: DatasetConfig, with_labels: bool) -> tuple[list[Slice], list[GroundTruth]]:
    slices, labels = [], []
    for volume in volumes:
        loaded = load_volume(volume.image, volume.mask, dataset.modality, dataset.slice_range)
        slices += loaded.slices
        if with_labels:
            labels += [GroundTruth(l) for l in load_labels(volume.labels, dataset.slice_range)]
    if with_labels and len(labels) != len(slices):
        raise IntegrityError(f"Dataset {dataset.name}: {len(labels)} label slices for {len(slices)} image slices")
    return slices, labels


def synthesize(config: ExperimentConfig, report: Report) -> Report:
    """Generate (or ingest) the raw splits of every dataset."""
    ws = report.workspace
    for dataset in config.datasets:
        fingerprint = _dataset_fingerprint(config, dataset)
        if all(_is_current(ws.raw(dataset.name, s), fingerprint) for s in RAW_SPLITS):
            log.info(f"{dataset.name}: raw data is current")
            continue
        with _guard(report, "synth", dataset.name):
            if dataset.source == "synthetic":
                splits = {s: (slices, None) for s, slices in _synthetic_splits(config, dataset).items()}
            else:
                train, _ = _ingest(dataset.train_volumes, dataset, with_labels=False)
                val = train[-dataset.n_val:] if 0 < dataset.n_val < len(train) else []
                train = train[: len(train) - len(val)]
                splits = {
                    "train": (train, None),
                    "val": (val, None),
                    "test": _ingest(dataset.test_volumes, dataset, with_labels=True),
                    "labeled": _ingest(dataset.labeled_volumes, dataset, with_labels=True),
                }
            for split, (slices, labels) in splits.items():
                directory = ws.raw(dataset.name, split)
                shutil.rmtree(directory, ignore_errors=True)
                store_dataset(directory, slices, _split_of(split), fingerprint, labels)
    return report


def _split_of(name: str) -> Split:
    return Split.TRAIN if name == "labeled" else Split(name)


def _load_raw(ws: Workspace, dataset: str, split: str) -> tuple[list[Slice], list[Optional[GroundTruth]]]:
    manifest = read_manifest(ws.raw(dataset, split) / "manifest.json")
    return manifest.load_slices(), manifest.load_ground_truth()


def _keep_nonempty(slices, labels, min_mask_pixels: int):
    kept = [(s, gt) for s, gt in zip(slices, labels) if s.mask_pixels >= min_mask_pixels]
    return [s for s, _ in kept], [gt for _, gt in kept]


def _keep_normalizable(slices, labels, box):
    kept = []
    for s, gt in zip(slices, labels):
        if is_normalizable(crop(s, box)):
            kept.append((s, gt))
        else:
            log.warning(f"Dropping {s}: fewer than 2 brain pixels or constant intensity after cropping")
    return [s for s, _ in kept], [gt for _, gt in kept]


def _content_digest(slices: list[Slice], truths: Optional[list[GroundTruth]]) -> str:
    h = hashlib.sha256()
    for s in slices:
        h.update(f"{s}|{s.modality.value}|{s.shape}".encode())
        h.update(s.pixels.tobytes())
        h.update(np.packbits(s.mask).tobytes())
    for gt in truths or []:
        h.update(np.packbits(gt.labels).tobytes())
    return h.hexdigest()


def preprocess_stage(config: ExperimentConfig, report: Report) -> Report:
    """Crop every split to one shared box, normalize, resize; synthetic lesions go in afterwards."""
    ws = report.workspace
    pre = config.preprocess
    for dataset in config.datasets:
        if report.failed(dataset.name):
            continue
        with _guard(report, "preprocess", dataset.name):
            raw = {split: _load_raw(ws, dataset.name, split) for split in RAW_SPLITS}
            raw = {split: _keep_nonempty(*pair, pre.min_mask_pixels) for split, pair in raw.items()}
            # the box spans train and test so lesions never fall outside the crop
            box = max_bounding_box(raw["train"][0] + raw["test"][0])
            for split, (slices, labels) in raw.items():
                directory = ws.prepared(dataset.name, split)
                shutil.rmtree(directory, ignore_errors=True)
                slices, labels = _keep_normalizable(slices, labels, box)
                if not slices:
                    store_dataset(directory, [], _split_of(split))
                    continue
                processed, _, digest = preprocess_dataset(slices, pre, box)
                truths = None
                if split in ("test", "labeled"):
                    if dataset.source == "synthetic":
                        seed = derive_seed(config.seed, dataset.name, split, "lesions")
                        pairs = inject_lesions(processed, dataset.lesion.spec(), seed)
                        processed, truths = [s for s, _ in pairs], [gt for _, gt in pairs]
                    else:
                        truths = [resize_labels(crop_labels(gt, box), pre.target_size) for gt in labels]
                # checkpoints key on this, so it must change whenever the stored data does
                digest = _digest({"preprocess": digest, "content": _content_digest(processed, truths)})
                store_dataset(directory, processed, _split_of(split), digest, truths)
    return report


def _prepared(ws: Workspace, dataset: str, split: str):
    return read_manifest(ws.prepared(dataset, split) / "manifest.json")


# --------------------------------------------------------------------------- detectors


def _detector(config: ExperimentConfig, spec: DetectorConfig) -> Detector:
    return create(
        spec.name, spec.kind, spec.input_size, spec.options, config.seed,
        threads=config.threads, progress=config.progress,
    )


def _jobs(config: ExperimentConfig, report: Report) -> Iterator[tuple[DatasetConfig, DetectorConfig]]:
    for dataset in config.datasets:
        for spec in config.detectors:
            if not report.failed(dataset.name, spec.name):
                yield dataset, spec


def job_key(dataset: str, detector: str) -> str:
    return f"{dataset}/{detector}"


def _data_fingerprint(ws: Workspace, dataset: str, detector: Detector) -> str:
    splits = ("labeled",) if detector.supervised else ("train", "val")
    return _digest({s: _prepared(ws, dataset, s).preprocessing_fingerprint for s in splits} | {"dataset": dataset})


def _try_reuse(detector: Detector, directory: Path, fingerprint: str) -> bool:
    marker = directory / "detector.json"
    if not marker.is_file():
        return False
    try:
        if json.loads(marker.read_text()).get("fingerprint") != fingerprint:
            return False
        detector.load(directory)
    except (AnomalyBenchError, json.JSONDecodeError, OSError) as e:
        log.warning(f"{detector}: cannot reuse checkpoint {directory} ({e}), retraining")
        return False
    log.info(f"{detector}: reusing checkpoint {directory.name}")
    return True


def train_stage(config: ExperimentConfig, report: Report) -> Report:
    ws = report.workspace
    for dataset, spec in _jobs(config, report):
        with _guard(report, "train", dataset.name, spec.name):
            detector = _detector(config, spec)
            fingerprint = detector.fingerprint(_data_fingerprint(ws, dataset.name, detector))
            directory = ws.checkpoint(dataset.name, spec.name, fingerprint)
            if not _try_reuse(detector, directory, fingerprint):
                if detector.supervised:
                    labeled = _prepared(ws, dataset.name, "labeled")
                    pairs = list(zip(labeled.load_slices(), labeled.load_ground_truth()))
                    detector.fit([], [], pairs)
                else:
                    train = _prepared(ws, dataset.name, "train").load_slices()
                    val = _prepared(ws, dataset.name, "val").load_slices() if dataset.n_val else []
                    if not train:
                        raise EmptyDatasetError(f"{dataset.name} has no training slices")
                    detector.fit(train, val)
                shutil.rmtree(directory, ignore_errors=True)
                directory.mkdir(parents=True)
                detector.save(directory)
                marker = {"fingerprint": fingerprint, "detector": spec.to_dict(), "loss_history": detector.loss_history}
                (directory / "detector.json").write_text(json.dumps(marker, indent=2))
            report.checkpoints[job_key(dataset.name, spec.name)] = str(directory.relative_to(ws.root))
    return report


def _load_detector(config: ExperimentConfig, report: Report, dataset: str, spec: DetectorConfig) -> Detector:
    try:
        directory = report.root / report.checkpoints[job_key(dataset, spec.name)]
    except KeyError:
        raise IntegrityError(f"No checkpoint recorded for {job_key(dataset, spec.name)}, run train first") from None
    detector = _detector(config, spec)
    detector.load(directory)
    return detector


def score_stage(config: ExperimentConfig, report: Report) -> Report:
    ws = report.workspace
    for dataset, spec in _jobs(config, report):
        with _guard(report, "score", dataset.name, spec.name):
            detector = _load_detector(config, report, dataset.name, spec)
            test = _prepared(ws, dataset.name, "test")
            directory = ws.maps(dataset.name, spec.name)
            shutil.rmtree(directory, ignore_errors=True)
            for entry in tqdm(test.entries, desc=spec.name, disable=not config.progress):
                difference = detector.score(read_slice(test.resolve(entry)))
                write_array(directory / Path(entry.path).stem, difference.scores, {"source": difference.source})
    return report


def read_maps(report: Report, dataset: str, detector: str) -> list[tuple[Slice, GroundTruth, DifferenceMap]]:
    """Test slices, labels and stored maps in manifest order."""
    ws = report.workspace
    test = _prepared(ws, dataset, "test")
    triples = []
    for s, gt, entry in zip(test.load_slices(), test.load_ground_truth(), test.entries):
        scores, meta = read_array(ws.maps(dataset, detector) / Path(entry.path).name)
        if gt is None:
            raise IntegrityError(f"Test slice {s} has no ground truth")
        triples.append((s, gt, DifferenceMap(scores, s.mask, meta.get("source", detector))))
    return triples


def evaluate_stage(config: ExperimentConfig, report: Report) -> Report:
    ws = report.workspace
    report.rows = []
    report.environment = environment(config)
    report.config_hash = config.config_hash()
    for dataset, spec in _jobs(config, report):
        with _guard(report, "eval", dataset.name, spec.name):
            detector = _detector(config, spec)
            scores, labels = pool((m, gt) for _, gt, m in read_maps(report, dataset.name, spec.name))
            try:
                curve = roc(scores, labels)
                area = auc(curve)
                path = write_roc(curve, ws.roc(dataset.name, spec.name))
                report.roc_files[job_key(dataset.name, spec.name)] = str(path.relative_to(ws.root))
            except UndefinedAUCError as e:
                log.warning(f"{spec.name} on {dataset.name}: {e}")
                area = None
            if detector.supervised:
                threshold = config.grids.supervised_threshold
                mdsc = dice(scores > threshold, labels)
            else:
                grid = config.grids.probability if detector.output == "probability" else config.grids.difference
                sweep = max_dice_sweep(scores, labels, grid)
                threshold, mdsc = sweep.best_threshold, sweep.mdsc
            checkpoint = Path(report.checkpoints.get(job_key(dataset.name, spec.name), "")).name
            report.rows.append(
                MetricRow(spec.name, dataset.name, area, mdsc, threshold, checkpoint, report.config_hash)
            )
            log.info(f"{spec.name} on {dataset.name}: AUC {area}, mDSC {mdsc:.4f} at {threshold:.4f}")
    write_metrics(report.rows, ws.root, {"environment": report.environment})
    return report


STAGES = {
    "synth": synthesize,
    "preprocess": preprocess_stage,
    "train": train_stage,
    "score": score_stage,
    "eval": evaluate_stage,
}


def run_stage(name: str, config: ExperimentConfig) -> Report:
    report = load_report(config.output_dir)
    report.failures = [f for f in report.failures if f.stage != name]
    STAGES[name](config, report)
    report.save()
    return report


def run(config: ExperimentConfig) -> Report:
    """All stages in order; failures are recorded per dataset/detector and the rest keeps going."""
    report = load_report(config.output_dir)
    report.failures = []
    for stage in STAGES.values():
        stage(config, report)
    report.save()
    if report.failures:
        log.warning(f"Run finished with {len(report.failures)} failures")
    else:
        log.info(f"Run finished: {len(report.rows)} metric rows in {report.root}")
    return report
