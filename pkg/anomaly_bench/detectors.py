"""Detector registry: one class per family, registered under the config ``kind`` names."""

import hashlib
import json
import logging
from dataclasses import fields
from pathlib import Path
from typing import ClassVar, Optional, Sequence

from .baselines import (
    EM_INITS,
    MeanModel,
    SpatialPrior,
    build_spatial_prior,
    em_fit,
    fit_mean_model,
    outlier_map,
    score_mean,
)
from .data import GroundTruth, Slice
from .errors import ConfigError, ContractError
from .evaluation import DifferenceMap
from .models import (
    AdversarialWeights,
    Architecture,
    DetectorKind,
    LatentLayout,
    TrainConfig,
    anomaly_map,
    load_checkpoint,
    save_checkpoint,
)
from .models import train as train_autoencoder
from .preprocess import resize_labels, resize_map, resize_nearest
from .supervised import UNetConfig, load_unet, predict, save_unet, train_unet

log = logging.getLogger("anomaly_bench.detectors")

REGISTRY: dict[str, type["Detector"]] = {}


def register(*kinds: str):
    def decorator(cls: type["Detector"]) -> type["Detector"]:
        for kind in kinds:
            REGISTRY[kind] = cls
        return cls

    return decorator


def create(name: str, kind: str, input_size: Optional[int], options: dict, seed: int, **runtime) -> "Detector":
    try:
        cls = REGISTRY[kind]
    except KeyError:
        raise ConfigError(f"Unknown detector kind {kind!r}") from None
    return cls(name, kind, input_size, options, seed, **runtime)


class Detector:
    # "difference" maps are swept over the difference grid, "probability" maps over the
    # probability grid; supervised maps are cut at a single fixed threshold
    output: ClassVar[str] = "difference"
    supervised: ClassVar[bool] = False
    defaults: ClassVar[dict] = {}

    def __init__(
        self,
        name: str,
        kind: str,
        input_size: Optional[int],
        options: dict,
        seed: int,
        threads: int = 1,
        progress: bool = False,
    ):
        self.check_options(options, name)
        self.name = name
        self.kind = kind
        self.input_size = input_size
        self.options = {**self.defaults, **options}
        self.seed = seed
        self.threads = threads
        self.progress = progress

    def __str__(self):
        return f"{self.name} ({self.kind})"

    @classmethod
    def check_options(cls, options: dict, where: str):
        unknown = set(options) - set(cls.defaults)
        if unknown:
            raise ConfigError(f"{where}: options {sorted(unknown)} do not apply, allowed: {sorted(cls.defaults)}")

    def fingerprint(self, data_fingerprint: str) -> str:
        payload = {
            "kind": self.kind,
            "input_size": self.input_size,
            "options": self.options,
            "seed": self.seed,
            "data": data_fingerprint,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_model_space(self, slice: Slice) -> Slice:
        if self.input_size is None or slice.shape[0] == self.input_size:
            return slice
        return resize_nearest(slice, self.input_size)

    def fit(
        self,
        train: Sequence[Slice],
        val: Sequence[Slice] = (),
        labeled: Sequence[tuple[Slice, GroundTruth]] = (),
    ):
        self._fit([self.to_model_space(s) for s in train], [self.to_model_space(s) for s in val], labeled)

    def score(self, slice: Slice) -> DifferenceMap:
        """Anomaly map in the geometry of ``slice``, resized back when the model runs smaller."""
        native = self._score(self.to_model_space(slice))
        if native.shape == slice.shape:
            return native
        scores = resize_map(native.scores, slice.shape[0])
        scores[~slice.mask] = 0.0
        return DifferenceMap(scores, slice.mask, source=native.source)

    def _fit(self, train: list[Slice], val: list[Slice], labeled: Sequence[tuple[Slice, GroundTruth]]):
        raise NotImplementedError

    def _score(self, slice: Slice) -> DifferenceMap:
        raise NotImplementedError

    def save(self, directory: Path):
        raise NotImplementedError

    def load(self, directory: Path):
        raise NotImplementedError

    @property
    def loss_history(self) -> list:
        return []


@register("mean")
class MeanDetector(Detector):
    defaults = {"sigma_map": False}

    def _fit(self, train, val, labeled):
        self.model = fit_mean_model(train, sigma_map=bool(self.options["sigma_map"]))

    def _score(self, slice):
        return score_mean(self.model, slice)

    def save(self, directory):
        self.model.save(directory)

    def load(self, directory):
        self.model = MeanModel.load(directory)


@register("gmm")
class GmmDetector(Detector):
    output = "probability"
    defaults = {"components": 3, "lambda_out": 0.01, "tol": 1e-6, "max_iter": 200, "init": "quantile"}

    @classmethod
    def check_options(cls, options: dict, where: str):
        super().check_options(options, where)
        if options.get("init", "quantile") not in EM_INITS:
            raise ConfigError(f"{where}: init must be one of {EM_INITS}, got {options['init']!r}")

    def _fit(self, train, val, labeled):
        self.prior = build_spatial_prior(train, int(self.options["components"]), self.seed)

    def _score(self, slice):
        fit = em_fit(
            slice,
            self.prior,
            int(self.options["components"]),
            float(self.options["lambda_out"]),
            float(self.options["tol"]),
            int(self.options["max_iter"]),
            str(self.options["init"]),
        )
        if not fit.converged:
            log.warning(f"{self}: EM on {slice} stopped at max_iter without converging")
        return outlier_map(fit)

    def save(self, directory):
        self.prior.save(directory)

    def load(self, directory):
        self.prior = SpatialPrior.load(directory)


_TRAINING_OPTIONS = {
    f.name: f.default
    for f in fields(TrainConfig)
    if f.name not in ("seed", "threads", "progress", "adversarial_weights", "betas", "critic_betas")
}


@register(*(kind.value for kind in DetectorKind))
class AutoEncoderDetector(Detector):
    defaults = {
        "latent": LatentLayout.SPATIAL.value,
        "latent_dim": 256,
        "recon_weight": 1.0,
        "latent_weight": 1.0,
        "image_weight": 1.0,
        **_TRAINING_OPTIONS,
    }

    def training_config(self) -> TrainConfig:
        options = {k: v for k, v in self.options.items() if k in _TRAINING_OPTIONS}
        weights = AdversarialWeights(
            self.options["recon_weight"], self.options["latent_weight"], self.options["image_weight"]
        )
        return TrainConfig(
            seed=self.seed,
            adversarial_weights=weights,
            threads=self.threads,
            progress=self.progress,
            **options,
        )

    def architecture(self, size: int) -> Architecture:
        return Architecture.for_input(size, LatentLayout(self.options["latent"]), int(self.options["latent_dim"]))

    def _fit(self, train, val, labeled):
        self.model = train_autoencoder(
            DetectorKind(self.kind),
            self.architecture(train[0].shape[0]),
            train,
            self.training_config(),
            val_slices=val or None,
        )

    def _score(self, slice):
        return anomaly_map(self.model, slice, seed=self.seed)

    def save(self, directory):
        save_checkpoint(self.model, directory)

    def load(self, directory):
        self.model = load_checkpoint(directory)
        if self.model.kind.value != self.kind:
            raise ContractError(f"{self}: checkpoint holds a {self.model.kind.value}")

    @property
    def loss_history(self):
        return self.model.loss_history


@register("unet")
class UNetDetector(Detector):
    output = "probability"
    supervised = True
    defaults = {
        f.name: f.default for f in fields(UNetConfig) if f.name not in ("seed", "threads", "progress")
    }

    def _fit(self, train, val, labeled):
        if not labeled:
            raise ContractError(f"{self} needs labeled slices")
        slices, labels = [], []
        for s, gt in labeled:
            model_slice = self.to_model_space(s)
            slices.append(model_slice)
            labels.append(gt if gt.shape == model_slice.shape else resize_labels(gt, model_slice.shape[0]))
        config = UNetConfig(seed=self.seed, threads=self.threads, progress=self.progress, **self.options)
        self.model = train_unet(slices, labels, config)

    def _score(self, slice):
        return predict(self.model, slice)

    def save(self, directory):
        save_unet(self.model, directory)

    def load(self, directory):
        self.model = load_unet(directory)

    @property
    def loss_history(self):
        return [{"total": value} for value in self.model.loss_history]
