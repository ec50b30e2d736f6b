import argparse
import logging
from typing import Callable

from ..config import ExperimentConfig, load_config
from ..errors import AnomalyBenchError
from ..plots import emit_plots
from ..runner import Report, load_report, run, run_stage

log = logging.getLogger("anomaly_bench.cli")


def _config(args: argparse.Namespace) -> ExperimentConfig:
    detectors = [d for d in args.detectors.split(",") if d] if args.detectors else None
    return load_config(args.config).with_overrides(seed=args.seed, output_dir=args.out, detectors=detectors)


def _stage(name: str) -> Callable[[argparse.Namespace], Report]:
    def command(args):
        return run_stage(name, _config(args))

    command.__name__ = name
    return command


def run_command(args) -> Report:
    config = _config(args)
    report = run(config)
    emit_plots(config, report, args.max_panels)
    return report


def plot_command(args) -> Report:
    config = _config(args)
    report = load_report(config.output_dir)
    emit_plots(config, report, args.max_panels)
    return report


VERBS: dict[str, tuple[str, Callable[[argparse.Namespace], Report]]] = {
    "synth": ("generate synthetic slices or ingest NIfTI volumes", _stage("synth")),
    "preprocess": ("crop, normalize and resize every split", _stage("preprocess")),
    "train": ("fit every detector (reusing matching checkpoints)", _stage("train")),
    "score": ("write a difference map per test slice", _stage("score")),
    "eval": ("pool maps into AUC / mDSC, write metrics and ROC files", _stage("eval")),
    "run": ("all stages, then plots", run_command),
    "plot": ("difference-map panels and ROC overlays", plot_command),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anomaly-bench", description="Unsupervised lesion detection benchmark")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    verbs = parser.add_subparsers(dest="verb", required=True)
    for name, (help_text, handler) in VERBS.items():
        verb = verbs.add_parser(name, help=help_text)
        verb.add_argument("--config", required=True, help="experiment TOML file")
        verb.add_argument("--seed", type=int, default=None, help="override the config seed")
        verb.add_argument("--out", default=None, help="override the output directory")
        verb.add_argument("--detectors", default=None, help="comma-separated detector names to keep")
        if name in ("run", "plot"):
            verb.add_argument("--max-panels", type=int, default=None, help="cap on panels per dataset")
        verb.set_defaults(handler=handler)
    return parser


def execute(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        report = args.handler(args)
    except AnomalyBenchError as e:
        log.error(f"{args.verb} failed: {e}")
        return 2
    for failure in report.failures:
        log.error(str(failure))
    return 1 if report.failures else 0
