from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from ..data import Slice
from ..errors import ValidationError
from ..evaluation import DifferenceMap
from .architecture import LatentLayout
from .bayes import posterior_mean
from .losses import reparameterize
from .training import TrainedModel


@dataclass(eq=False)
class LatentCode:
    mean: np.ndarray
    log_variance: Optional[np.ndarray]
    sample: np.ndarray
    epsilon: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mean.shape


def _as_batch(model: TrainedModel, slice: Slice) -> torch.Tensor:
    size = model.architecture.input_size
    if slice.shape != (size, size):
        raise ValidationError(f"Slice {slice} has shape {slice.shape}, model expects {size}x{size}")
    dtype = next(model.network.parameters()).dtype
    return torch.from_numpy(slice.pixels).to(dtype)[None, None]


def _latent_layout(model: TrainedModel, z: torch.Tensor) -> np.ndarray:
    # channels-last so spatial latents read (h, w, c)
    if model.architecture.latent_layout is LatentLayout.SPATIAL:
        z = z.permute(0, 2, 3, 1)
    return z[0].detach().cpu().numpy()


@torch.no_grad()
def encode(model: TrainedModel, slice: Slice, generator: Optional[torch.Generator] = None) -> LatentCode:
    """Latent mean/log-variance of ``slice``; Bayesian weights are held at their means."""
    x = _as_batch(model, slice)
    with posterior_mean(model.network):
        mean, log_variance = model.network.encode_distribution(x)
    if log_variance is None:
        code = _latent_layout(model, mean)
        return LatentCode(mean=code, log_variance=None, sample=code.copy())
    sample, epsilon = reparameterize(mean, log_variance, generator)
    return LatentCode(
        mean=_latent_layout(model, mean),
        log_variance=_latent_layout(model, log_variance),
        sample=_latent_layout(model, sample),
        epsilon=_latent_layout(model, epsilon),
    )


@torch.no_grad()
def _reconstruction(model: TrainedModel, slice: Slice, samples: Optional[int], seed: int) -> np.ndarray:
    x = _as_batch(model, slice)
    if not model.kind.bayesian:
        return model.network.reconstruct(x)[0, 0].cpu().numpy()
    samples = samples or model.training_config.inference_samples
    total = torch.zeros_like(x)
    for m in range(samples):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + m)
            total += model.network.reconstruct(x)
    return (total / samples)[0, 0].cpu().numpy()


def reconstruct(model: TrainedModel, slice: Slice, samples: Optional[int] = None, seed: int = 0) -> Slice:
    """Decode the latent mean; Bayesian models average ``samples`` weight draws seeded ``seed + m``."""
    return slice.replace(pixels=_reconstruction(model, slice, samples, seed))


def anomaly_map(model: TrainedModel, slice: Slice, samples: Optional[int] = None, seed: int = 0) -> DifferenceMap:
    rec = _reconstruction(model, slice, samples, seed).astype(np.float64)
    scores = np.abs(slice.pixels.astype(np.float64) - rec)
    scores[~slice.mask] = 0.0
    return DifferenceMap(scores, slice.mask, source=model.kind.value)
