"""Figures: difference-map panels per test slice and one ROC overlay per dataset."""

import logging
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import ExperimentConfig  # noqa: E402
from .data import slice_name  # noqa: E402
from .evaluation import DifferenceMap, read_roc  # noqa: E402
from .runner import Report, job_key, read_maps  # noqa: E402

log = logging.getLogger("anomaly_bench.plots")


def _detectors_with_maps(config: ExperimentConfig, report: Report, dataset: str) -> list[str]:
    names = []
    for spec in config.detectors:
        if report.failed(dataset, spec.name) or not report.workspace.maps(dataset, spec.name).is_dir():
            continue
        names.append(spec.name)
    return names


def panel_figure(slice, ground_truth, maps: dict[str, DifferenceMap]):
    """Input, ground truth, then one map per detector; each map scaled to [0, its max]."""
    columns = 2 + len(maps)
    fig, axes = plt.subplots(1, columns, figsize=(2.2 * columns, 2.4), squeeze=False)
    axes = axes[0]
    axes[0].imshow(slice.pixels, cmap="gray")
    axes[0].set_title(str(slice), fontsize=8)
    axes[1].imshow(ground_truth.labels, cmap="gray", vmin=0, vmax=1)
    axes[1].set_title("ground truth", fontsize=8)
    for ax, (name, difference) in zip(axes[2:], maps.items()):
        top = float(difference.scores.max())
        ax.imshow(difference.scores, cmap="inferno", vmin=0.0, vmax=top if top > 0 else 1.0)
        ax.set_title(name, fontsize=8)
    for ax in axes:
        ax.set_axis_off()
    fig.tight_layout()
    return fig


def roc_figure(curves: dict, title: str):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, curve in curves.items():
        ax.plot(curve.fpr, curve.tpr, label=name)
    ax.plot([0, 1], [0, 1], "k--", linewidth=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    return fig


def emit_plots(config: ExperimentConfig, report: Report, max_panels: Optional[int] = None) -> list[Path]:
    out = report.workspace.plots
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for dataset in config.datasets:
        names = _detectors_with_maps(config, report, dataset.name)
        if not names:
            log.warning(f"No difference maps for {dataset.name}, skipping its plots")
            continue
        per_detector = {name: read_maps(report, dataset.name, name) for name in names}
        test_count = len(per_detector[names[0]])
        for i in range(test_count if max_panels is None else min(test_count, max_panels)):
            slice, truth, _ = per_detector[names[0]][i]
            fig = panel_figure(slice, truth, {name: per_detector[name][i][2] for name in names})
            path = out / f"{dataset.name}__{i:05d}_{slice_name(slice)}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)

        curves = {
            name: read_roc(report.root / report.roc_files[job_key(dataset.name, name)])
            for name in names
            if job_key(dataset.name, name) in report.roc_files
        }
        fig = roc_figure(curves, dataset.name)
        path = out / f"{dataset.name}__roc.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    log.info(f"Wrote {len(written)} figures to {out}")
    return written
