import json
import logging
from pathlib import Path

import nibabel as nib
import numpy as np
import pytest

from anomaly_bench.cli import execute
from anomaly_bench.config import load_config, parse_config
from anomaly_bench.data import GroundTruth, read_manifest
from anomaly_bench.errors import ConfigError
from anomaly_bench.evaluation import DifferenceMap, roc
from anomaly_bench.plots import panel_figure, roc_figure
from anomaly_bench.runner import derive_seed, load_report, read_maps, run, run_stage

from .conftest import write_config

CONFIGS = Path(__file__).parents[1] / "configs"

DATASET = """
[preprocess]
target_size = 32

[[datasets]]
name = "tiny"
modality = "T2like"
size = 32
n_train = 10
n_val = 2
n_test = 3
n_labeled = {labeled}
[datasets.lesion]
polarity = "bright"
radius_px = 3
intensity_offset = 3.0
"""

MEAN = """
[[detectors]]
name = "mean"
kind = "mean"
"""

UNET = """
[[detectors]]
name = "unet"
kind = "unet"
epochs = 1
batch_size = 2
depth = 2
base_channels = 4
"""


def _config(tmp_path, detectors=MEAN, labeled=0):
    return write_config(tmp_path / "experiment.toml", DATASET.format(labeled=labeled) + detectors, tmp_path / "out")


def _payload(**overrides):
    payload = {
        "seed": 1,
        "datasets": [{"name": "a", "size": 32}],
        "detectors": [{"name": "mean", "kind": "mean"}],
    }
    payload.update(overrides)
    return payload


@pytest.mark.parametrize(
    "payload",
    [
        {k: v for k, v in _payload().items() if k != "seed"},
        _payload(colour="blue"),
        _payload(detectors=[]),
        _payload(datasets=[]),
        _payload(detectors=[{"name": "x", "kind": "svm"}]),
        _payload(detectors=[{"name": "x", "kind": "mean", "latent_dim": 3}]),
        _payload(detectors=[{"name": "x", "kind": "gmm", "init": "kmeans"}]),
        _payload(detectors=[{"name": "m", "kind": "mean"}, {"name": "m", "kind": "gmm"}]),
        _payload(datasets=[{"name": "a", "size": 48}]),
        _payload(datasets=[{"name": "a", "lesion": {"polarity": "dark", "intensity_offset": 2.0}}]),
        _payload(datasets=[{"name": "a", "source": "nifti"}]),
        _payload(grids={"difference": {"start": 1.0, "stop": 0.0, "points": 5}}),
    ],
)
def test_bad_configs(payload):
    with pytest.raises(ConfigError):
        parse_config(payload)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


@pytest.mark.parametrize("name, detectors", [("table1.toml", 13), ("benchmark.toml", 13), ("smoke.toml", 4)])
def test_committed_configs_load(name, detectors):
    config = load_config(CONFIGS / name)
    assert len(config.detectors) == detectors
    assert len(config.config_hash()) == 64


def test_config_hash_ignores_output_dir():
    config = parse_config(_payload())
    assert config.with_overrides(output_dir="elsewhere").config_hash() == config.config_hash()
    assert config.with_overrides(seed=2).config_hash() != config.config_hash()
    with pytest.raises(ConfigError):
        config.with_overrides(detectors=["nope"])


def test_derived_seeds():
    assert derive_seed(0, "a", "train") == derive_seed(0, "a", "train")
    assert derive_seed(0, "a", "train") != derive_seed(0, "a", "test")
    assert derive_seed(0, "a", "train") != derive_seed(1, "a", "train")


def test_mean_run(tmp_path):
    report = run(load_config(_config(tmp_path)))
    assert report.ok
    assert len(report.rows) == 1
    row = report.rows[0]
    assert (row.detector, row.dataset) == ("mean", "tiny")
    assert 0.0 <= row.auc <= 1.0
    assert row.checkpoint.startswith("mean-")

    root = tmp_path / "out"
    assert (root / "metrics.csv").is_file()
    assert json.loads((root / "metrics.json").read_text())["environment"]["seed"] == 0
    assert (root / "roc" / "tiny__mean.csv").is_file()
    triples = read_maps(report, "tiny", "mean")
    assert len(triples) == 3
    assert all(gt.labels.any() for _, gt, _ in triples)


def test_rerun_is_identical_and_reuses_checkpoints(tmp_path, caplog):
    config = load_config(_config(tmp_path))
    run(config)
    first = (tmp_path / "out" / "metrics.csv").read_bytes()
    with caplog.at_level(logging.INFO, logger="anomaly_bench"):
        run(config)
    assert (tmp_path / "out" / "metrics.csv").read_bytes() == first
    assert "raw data is current" in caplog.text
    assert "reusing checkpoint" in caplog.text


def test_stages_one_at_a_time(tmp_path):
    config = load_config(_config(tmp_path))
    for stage in ("synth", "preprocess", "train", "score", "eval"):
        assert run_stage(stage, config).ok
    by_stage = (tmp_path / "out" / "metrics.csv").read_bytes()
    assert load_report(tmp_path / "out").rows[0].detector == "mean"

    whole = load_config(write_config(tmp_path / "again.toml", DATASET.format(labeled=0) + MEAN, tmp_path / "whole"))
    run(whole)
    assert (tmp_path / "whole" / "metrics.csv").read_bytes() == by_stage


def test_failure_is_recorded_and_run_continues(tmp_path):
    report = run(load_config(_config(tmp_path, MEAN + UNET)))
    assert [r.detector for r in report.rows] == ["mean"]
    assert len(report.failures) == 1
    failure = report.failures[0]
    assert (failure.stage, failure.detector) == ("train", "unet")
    assert load_report(tmp_path / "out").failures[0].error == failure.error


def test_unet_row_uses_fixed_threshold(tmp_path):
    report = run(load_config(_config(tmp_path, UNET, labeled=4)))
    assert report.ok
    assert report.rows[0].threshold == 0.5


def test_cli_exit_codes(tmp_path):
    assert execute(["run", "--config", _config(tmp_path), "--max-panels", "2"]) == 0
    plots = sorted(p.name for p in (tmp_path / "out" / "plots").iterdir())
    assert "tiny__roc.png" in plots
    assert len(plots) == 3

    failing = tmp_path / "failing"
    failing.mkdir()
    assert execute(["run", "--config", _config(failing, MEAN + UNET)]) == 1
    assert execute(["eval", "--config", str(tmp_path / "absent.toml")]) == 2
    assert execute(["run", "--config", _config(tmp_path), "--detectors", "gmm"]) == 2


def test_panel_figure_layout(healthy32):
    target = healthy32[0]
    truth = GroundTruth(np.zeros(target.shape, dtype=bool))
    maps = {name: DifferenceMap(np.abs(target.pixels), target.mask) for name in ("a", "b", "c")}
    assert len(panel_figure(target, truth, maps).axes) == 5


def test_roc_figure_lines(rng):
    curves = {name: roc(rng.normal(size=40), rng.random(40) < 0.5) for name in ("a", "b")}
    ax = roc_figure(curves, "t").axes[0]
    assert len(ax.lines) == 3


def test_smoke_runs_are_byte_identical(tmp_path):
    config = load_config(CONFIGS / "smoke.toml")
    for name in ("first", "second"):
        assert run(config.with_overrides(output_dir=tmp_path / name)).ok
    assert (tmp_path / "first" / "metrics.csv").read_bytes() == (tmp_path / "second" / "metrics.csv").read_bytes()


def test_changed_training_data_retrains(tmp_path, caplog):
    first = run(load_config(_config(tmp_path)))
    t1 = DATASET.replace('"T2like"', '"T1like"').format(labeled=0) + MEAN
    with caplog.at_level(logging.INFO, logger="anomaly_bench"):
        second = run(load_config(write_config(tmp_path / "t1.toml", t1, tmp_path / "out")))
    assert second.ok
    assert second.checkpoints["tiny/mean"] != first.checkpoints["tiny/mean"]
    assert "reusing checkpoint" not in caplog.text


def _volume(path, planes):
    nib.save(nib.Nifti1Image(np.stack(planes, axis=-1).astype(np.float32), np.eye(4)), str(path))
    return str(path)


def test_degenerate_nifti_slice_is_dropped_with_its_labels(tmp_path, healthy32):
    flat = np.where(healthy32[9].mask, 1.0, 0.0)
    labels = []
    for side in (2, 0, 6):
        plane = np.zeros((32, 32))
        plane[14:14 + side, 14:14 + side] = 1
        labels.append(plane)
    train = _volume(tmp_path / "train.nii.gz", [s.pixels for s in healthy32[:8]])
    test = _volume(tmp_path / "test.nii.gz", [healthy32[8].pixels, flat, healthy32[10].pixels])
    seg = _volume(tmp_path / "seg.nii.gz", labels)
    body = f"""
[preprocess]
target_size = 32

[[datasets]]
name = "scans"
source = "nifti"
train_volumes = [{{ image = "{train}" }}]
test_volumes = [{{ image = "{test}", labels = "{seg}" }}]
""" + MEAN
    config = load_config(write_config(tmp_path / "nifti.toml", body, tmp_path / "out"))
    for stage in ("synth", "preprocess"):
        assert run_stage(stage, config).ok
    prepared = read_manifest(tmp_path / "out" / "prepared" / "scans" / "test" / "manifest.json")
    assert [s.slice_index for s in prepared.load_slices()] == [0, 2]
    small, large = (gt.labels.sum() for gt in prepared.load_ground_truth())
    assert 0 < small < large
