"""Probabilistic intensity baselines.

* ``MeanModel`` -- one Gaussian per pixel; with sigma fixed to 1 the score is ``|x - mu|``.
* ``SpatialPrior`` + ``em_fit`` -- a K-component intensity mixture whose weights depend on
  location, refitted per test image with EM, plus an outlier component of constant
  likelihood ``lambda_out`` whose posterior is the anomaly score.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.mixture import GaussianMixture

from .data import Slice, read_array, write_array
from .errors import ContractError, EmptyDatasetError, IntegrityError, ValidationError
from .evaluation import DifferenceMap

log = logging.getLogger("anomaly_bench.baselines")

VARIANCE_FLOOR = 1e-4
EM_INITS = ("quantile", "prior")
SIGMA_MAP_FLOOR = 1e-3
GLOBAL_FIT_SAMPLES = 200_000


@dataclass(eq=False)
class MeanModel:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float32)
        self.sigma = np.asarray(self.sigma, dtype=np.float32)
        if self.mu.shape != self.sigma.shape:
            raise ValidationError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ in shape")
        if not (self.sigma > 0).all():
            raise ValidationError("sigma must be positive everywhere")

    def save(self, directory) -> Path:
        directory = Path(directory)
        write_array(directory / "mu", self.mu, {"model": "mean"})
        return write_array(directory / "sigma", self.sigma, {"model": "mean"})

    @classmethod
    def load(cls, directory) -> "MeanModel":
        directory = Path(directory)
        mu, _ = read_array(directory / "mu.json")
        sigma, _ = read_array(directory / "sigma.json")
        return cls(mu, sigma)


def _uniform_shape(slices: Sequence[Slice]) -> tuple[int, int]:
    if not slices:
        raise EmptyDatasetError("Need at least one training slice")
    shape = slices[0].shape
    for s in slices:
        if s.shape != shape:
            raise ValidationError(f"Slice {s} has shape {s.shape}, training set uses {shape}")
    return shape


def fit_mean_model(train: Sequence[Slice], sigma_map: bool = False) -> MeanModel:
    """Per-pixel mean of the training slices; sigma is 1 unless ``sigma_map`` is set."""
    _uniform_shape(train)
    stack = np.stack([s.pixels for s in train]).astype(np.float64)
    mu = stack.mean(axis=0)
    if sigma_map:
        sigma = np.maximum(stack.std(axis=0), SIGMA_MAP_FLOOR)
    else:
        sigma = np.ones_like(mu)
    return MeanModel(mu, sigma)


def score_mean(model: MeanModel, slice: Slice) -> DifferenceMap:
    if slice.shape != model.mu.shape:
        raise ValidationError(f"Slice {slice} has shape {slice.shape}, mean model expects {model.mu.shape}")
    scores = np.abs(slice.pixels.astype(np.float64) - model.mu.astype(np.float64))
    scores = scores / model.sigma.astype(np.float64)
    scores[~slice.mask] = 0.0
    return DifferenceMap(scores, slice.mask, source="mean")


# --------------------------------------------------------------------------- spatial prior


@dataclass(eq=False)
class SpatialPrior:
    phi: np.ndarray
    means: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    degenerate: bool = False

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 3:
            raise ValidationError(f"Spatial prior must be (rows, cols, K), got {self.phi.shape}")
        if (self.phi < 0).any():
            raise ValidationError("Spatial prior has negative weights")

    @property
    def components(self) -> int:
        return self.phi.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.phi.shape[:2]

    @classmethod
    def uniform(cls, shape: tuple[int, int], components: int) -> "SpatialPrior":
        return cls(np.full((*shape, components), 1.0 / components))

    def save(self, directory) -> Path:
        directory = Path(directory)
        write_array(directory / "phi", self.phi, {"model": "gmm", "components": self.components})
        meta = {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "degenerate": self.degenerate,
        }
        path = directory / "prior.json"
        path.write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, directory) -> "SpatialPrior":
        directory = Path(directory)
        phi, _ = read_array(directory / "phi.json")
        try:
            meta = json.loads((directory / "prior.json").read_text())
        except (FileNotFoundError, json.JSONDecodeError) as e:
            raise IntegrityError(f"Spatial prior metadata in {directory} is unreadable: {e}") from e
        # float32 storage: renormalize so rows still sum to 1
        phi = phi.astype(np.float64)
        phi /= phi.sum(axis=2, keepdims=True)
        return cls(phi, np.asarray(meta["means"]), np.asarray(meta["stds"]), bool(meta["degenerate"]))


def fit_global_gmm(values: np.ndarray, components: int, seed: int = 0) -> tuple[GaussianMixture, bool]:
    """1D mixture over pooled intensities, components sorted by mean."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size > GLOBAL_FIT_SAMPLES:
        rng = np.random.default_rng(seed)
        values = values[rng.choice(values.size, GLOBAL_FIT_SAMPLES, replace=False)]
    gmm = GaussianMixture(
        n_components=components,
        covariance_type="diag",
        init_params="kmeans",
        reg_covar=VARIANCE_FLOOR,
        random_state=seed,
        max_iter=500,
    ).fit(values.reshape(-1, 1))

    order = np.argsort(gmm.means_.ravel())
    gmm.weights_ = gmm.weights_[order]
    gmm.means_ = gmm.means_[order]
    gmm.covariances_ = gmm.covariances_[order]
    gmm.precisions_cholesky_ = gmm.precisions_cholesky_[order]
    gmm.precisions_ = gmm.precisions_[order]

    degenerate = (not gmm.converged_) or bool((gmm.weights_ < 1e-3).any())
    if degenerate:
        log.warning(f"Global {components}-component mixture is degenerate (weights {gmm.weights_.round(4)})")
    return gmm, degenerate


def build_spatial_prior(train: Sequence[Slice], components: int = 3, seed: int = 0) -> SpatialPrior:
    """Average the global mixture's posterior per pixel over the training slices."""
    if components < 2:
        raise ContractError(f"Spatial prior needs at least 2 components, got {components}")
    shape = _uniform_shape(train)
    pooled = np.concatenate([s.pixels[s.mask] for s in train])
    gmm, degenerate = fit_global_gmm(pooled, components, seed)

    totals = np.zeros((*shape, components), dtype=np.float64)
    counts = np.zeros(shape, dtype=np.int64)
    for s in train:
        if not s.mask.any():
            continue
        totals[s.mask] += gmm.predict_proba(s.pixels[s.mask].astype(np.float64).reshape(-1, 1))
        counts[s.mask] += 1

    phi = np.full((*shape, components), 1.0 / components)
    seen = counts > 0
    phi[seen] = totals[seen] / counts[seen, None]
    return SpatialPrior(
        phi,
        means=gmm.means_.ravel().copy(),
        stds=np.sqrt(gmm.covariances_.ravel()),
        degenerate=degenerate,
    )


# --------------------------------------------------------------------------- per-image EM


@dataclass(eq=False)
class GmmFit:
    means: np.ndarray
    stds: np.ndarray
    lambda_out: float
    responsibilities: np.ndarray
    mask: np.ndarray
    log_likelihood_trace: list[float]
    converged: bool = False
    variance_floored: bool = False

    @property
    def components(self) -> int:
        return len(self.means)

    @property
    def outlier_posterior(self) -> np.ndarray:
        return self.responsibilities[:, -1]


def _log_terms(x: np.ndarray, log_phi: np.ndarray, means: np.ndarray, stds: np.ndarray, lambda_out: float) -> np.ndarray:
    """(pixels, K + 1) joint log terms; the last column is the outlier's constant ``log(lambda)``."""
    z = (x[:, None] - means[None, :]) / stds[None, :]
    log_normal = -0.5 * z**2 - np.log(stds)[None, :] - 0.5 * np.log(2 * np.pi)
    with np.errstate(divide="ignore"):
        log_outlier = np.log(lambda_out) if lambda_out > 0 else -np.inf
    return np.concatenate([log_phi + log_normal, np.full((x.size, 1), log_outlier)], axis=1)


def _e_step(x, log_phi, means, stds, lambda_out) -> tuple[np.ndarray, float]:
    terms = _log_terms(x, log_phi, means, stds, lambda_out)
    totals = logsumexp(terms, axis=1, keepdims=True)
    return np.exp(terms - totals), float(totals.sum())


def responsibilities(x, phi, means, stds, lambda_out: float) -> np.ndarray:
    """Posterior over the K tissue components and the outlier for fixed parameters."""
    x = np.asarray(x, dtype=np.float64).ravel()
    with np.errstate(divide="ignore"):
        log_phi = np.log(np.asarray(phi, dtype=np.float64).reshape(x.size, -1))
    posterior, _ = _e_step(x, log_phi, np.asarray(means, float), np.asarray(stds, float), lambda_out)
    return posterior


def em_fit(
    slice: Slice,
    prior: SpatialPrior,
    components: int = 3,
    lambda_out: float = 0.01,
    tol: float = 1e-6,
    max_iter: int = 200,
    init: str = "quantile",
) -> GmmFit:
    """Refit the component means/stds to one image; weights stay at the spatial prior.

    ``init="quantile"`` starts the means at the K quantiles of the in-mask intensities and
    every std at the pooled std divided by K. ``init="prior"`` starts from the global
    component means and stds stored in ``prior``. Stops when the relative log-likelihood
    gain drops below ``tol`` or after ``max_iter`` iterations.
    """
    if lambda_out < 0:
        raise ContractError(f"lambda_out must be non-negative, got {lambda_out}")
    if init not in EM_INITS:
        raise ContractError(f"Unknown EM initialization {init!r}, expected one of {EM_INITS}")
    if prior.components != components:
        raise ContractError(f"Spatial prior has {prior.components} components, fit asked for {components}")
    if prior.shape != slice.shape:
        raise ValidationError(f"Slice {slice} has shape {slice.shape}, prior expects {prior.shape}")
    if not slice.mask.any():
        raise EmptyDatasetError(f"{slice} has no brain pixels to fit")

    x = slice.pixels[slice.mask].astype(np.float64)
    with np.errstate(divide="ignore"):
        log_phi = np.log(prior.phi[slice.mask])
    if init == "prior":
        if len(prior.means) != components or len(prior.stds) != components:
            raise ContractError(f"Spatial prior carries no {components}-component means and stds to start from")
        means = prior.means.astype(np.float64).copy()
        stds = np.maximum(prior.stds.astype(np.float64), np.sqrt(VARIANCE_FLOOR))
    else:
        means = np.quantile(x, (np.arange(components) + 0.5) / components)
        stds = np.full(components, max(x.std() / components, np.sqrt(VARIANCE_FLOOR)))

    posterior, log_likelihood = _e_step(x, log_phi, means, stds, lambda_out)
    trace = [log_likelihood]
    converged = False
    floored = False
    for _ in range(max_iter):
        weights = posterior[:, :components]
        mass = weights.sum(axis=0)
        active = mass > 1e-12
        new_means = means.copy()
        new_means[active] = (weights[:, active] * x[:, None]).sum(axis=0) / mass[active]
        variance = np.full(components, VARIANCE_FLOOR)
        variance[active] = (weights[:, active] * (x[:, None] - new_means[active]) ** 2).sum(axis=0) / mass[active]
        new_stds = stds.copy()
        new_stds[active] = np.sqrt(variance[active])
        if (new_stds < np.sqrt(VARIANCE_FLOOR)).any():
            floored = True
            new_stds = np.maximum(new_stds, np.sqrt(VARIANCE_FLOOR))
        means, stds = new_means, new_stds

        posterior, log_likelihood = _e_step(x, log_phi, means, stds, lambda_out)
        gain = log_likelihood - trace[-1]
        trace.append(log_likelihood)
        if abs(gain) < tol * max(abs(log_likelihood), 1.0):
            converged = True
            break

    if floored:
        log.warning(f"EM on {slice}: a component std hit the floor {np.sqrt(VARIANCE_FLOOR)}")
    return GmmFit(
        means=means,
        stds=stds,
        lambda_out=lambda_out,
        responsibilities=posterior,
        mask=slice.mask.copy(),
        log_likelihood_trace=trace,
        converged=converged,
        variance_floored=floored,
    )


def outlier_map(fit: GmmFit) -> DifferenceMap:
    scores = np.zeros(fit.mask.shape, dtype=np.float64)
    scores[fit.mask] = np.clip(fit.outlier_posterior, 0.0, 1.0)
    return DifferenceMap(scores, fit.mask, source=f"gmm({fit.lambda_out})")
