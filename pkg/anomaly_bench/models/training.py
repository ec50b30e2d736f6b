"""Training engine shared by the six auto-encoder kinds."""

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from ..data import Slice
from ..errors import DivergenceError, EmptyDatasetError, ValidationError
from .architecture import Architecture, AutoEncoder, CriticState, DetectorKind
from .losses import (
    AdversarialWeights,
    aae_losses,
    alpha_gan_losses,
    corrupt,
    elbo_loss,
    recon_loss,
)

log = logging.getLogger("anomaly_bench.models.training")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    critic_betas: tuple[float, float] = (0.0, 0.9)
    n_critic: int = 5
    gp_coeff: float = 10.0
    noise_sigma: float = 0.5
    beta: float = 1.0
    inference_samples: int = 16
    adversarial_weights: AdversarialWeights = AdversarialWeights()
    patience: int = 10
    min_improvement: float = 1e-3
    zero_init_output: bool = False
    threads: Optional[int] = 1
    progress: bool = False

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "critic_betas", tuple(self.critic_betas))
        if isinstance(self.adversarial_weights, dict):
            object.__setattr__(self, "adversarial_weights", AdversarialWeights(**self.adversarial_weights))

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["betas"] = list(self.betas)
        payload["critic_betas"] = list(self.critic_betas)
        payload.pop("progress")
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        return cls(**payload)


@dataclass(eq=False)
class TrainedModel:
    kind: DetectorKind
    architecture: Architecture
    network: AutoEncoder
    training_config: TrainConfig
    loss_history: list[dict] = field(default_factory=list)
    critics: Optional[CriticState] = None
    num_training_slices: int = 0
    deterministic: bool = True

    def __str__(self):
        return f"{self.kind.value} {self.architecture.latent_shape} ({len(self.loss_history)} epochs)"

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: t.detach().cpu().numpy() for name, t in self.network.state_dict().items()}


def slices_to_tensors(slices: Sequence[Slice], input_size: int) -> tuple[torch.Tensor, torch.Tensor]:
    if not slices:
        raise EmptyDatasetError("No slices to stack")
    for s in slices:
        if s.shape != (input_size, input_size):
            raise ValidationError(f"Slice {s} has shape {s.shape}, model expects {input_size}x{input_size}")
    images = torch.from_numpy(np.stack([s.pixels for s in slices])[:, None].astype(np.float32))
    masks = torch.from_numpy(np.stack([s.mask for s in slices])[:, None].astype(np.float32))
    return images, masks


class _Trainer:
    def __init__(self, kind: DetectorKind, network: AutoEncoder, critics, config: TrainConfig, num_slices: int):
        self.kind = kind
        self.network = network
        self.critics = critics
        self.config = config
        self.num_slices = num_slices
        self.generator = torch.Generator().manual_seed(config.seed)
        self.optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate, betas=config.betas)
        self.critic_optimizer = (
            torch.optim.Adam(critics.parameters(), lr=config.learning_rate, betas=config.critic_betas)
            if critics is not None
            else None
        )
        self.steps: dict[DetectorKind, Callable] = {
            DetectorKind.AE: self._autoencoder_step,
            DetectorKind.DAE: self._autoencoder_step,
            DetectorKind.VAE: self._elbo_step,
            DetectorKind.VAE_BBB: self._elbo_step,
            DetectorKind.AAE: self._aae_step,
            DetectorKind.ALPHA_GAN: self._alpha_gan_step,
        }

    def step(self, x, mask) -> dict[str, float]:
        return self.steps[self.kind](x, mask)

    def _apply(self, loss: torch.Tensor):
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()

    def _autoencoder_step(self, x, mask):
        source = x
        if self.kind is DetectorKind.DAE:
            source = corrupt(x, mask, self.config.noise_sigma, self.generator)
        loss = recon_loss(x, self.network.decode(self.network.encode(source)), mask)
        self._apply(loss)
        return {"total": loss.item(), "recon": loss.item()}

    def _elbo_step(self, x, mask):
        terms = elbo_loss(self.network, x, mask, self.config.beta, self.num_slices, self.generator)
        self._apply(terms.total)
        return {
            "total": terms.total.item(),
            "recon": terms.recon.item(),
            "kl": terms.kl.item(),
            "weight_kl": terms.weight_kl.item(),
        }

    def _critic_updates(self, compute: Callable[[], torch.Tensor]) -> float:
        value = 0.0
        for _ in range(self.config.n_critic):
            loss = compute()
            self.critic_optimizer.zero_grad()
            loss.backward()
            self.critic_optimizer.step()
            value = loss.item()
        return value

    def _aae_step(self, x, mask):
        def losses():
            return aae_losses(
                self.network, self.critics, x, mask, self.config.gp_coeff,
                self.config.adversarial_weights, self.generator,
            )

        critic = self._critic_updates(lambda: losses().latent_critic)
        terms = losses()
        self._apply(terms.autoencoder)
        return {"total": terms.autoencoder.item(), "recon": terms.recon.item(), "latent_critic": critic}

    def _alpha_gan_step(self, x, mask):
        def losses():
            return alpha_gan_losses(
                self.network, self.critics, x, mask, self.config.gp_coeff,
                self.config.adversarial_weights, self.generator,
            )

        def critic_total():
            terms = losses()
            return terms.latent_critic + terms.recon_critic

        critic = self._critic_updates(critic_total)
        terms = losses()
        encoder_params = list(self.network.encoder.parameters())
        decoder_params = list(self.network.decoder.parameters())
        encoder_grads = torch.autograd.grad(terms.encoder, encoder_params, retain_graph=True, allow_unused=True)
        decoder_grads = torch.autograd.grad(terms.generator, decoder_params, allow_unused=True)
        self.optimizer.zero_grad()
        for param, grad in zip(encoder_params + decoder_params, encoder_grads + decoder_grads):
            param.grad = grad
        self.optimizer.step()
        return {
            "total": terms.generator.item(),
            "recon": terms.recon.item(),
            "encoder": terms.encoder.item(),
            "critics": critic,
        }

    @torch.no_grad()
    def validation_loss(self, images, masks) -> float:
        self.network.eval()
        total = 0.0
        for start in range(0, len(images), self.config.batch_size):
            x = images[start:start + self.config.batch_size]
            m = masks[start:start + self.config.batch_size]
            total += recon_loss(x, self.network.reconstruct(x), m).item() * len(x)
        self.network.train()
        return total / len(images)


def train(
    kind: DetectorKind,
    architecture: Architecture,
    slices: Sequence[Slice],
    config: TrainConfig,
    val_slices: Optional[Sequence[Slice]] = None,
    diagnostic_dir: Optional[Path] = None,
) -> TrainedModel:
    """Fit one auto-encoder kind; deterministic for a fixed seed on a single thread.

    With ``val_slices`` training stops once the validation reconstruction loss has not
    improved by ``min_improvement`` (relative) for ``patience`` epochs; ``epochs`` is the cap.
    """
    kind = DetectorKind(kind)
    if config.threads:
        torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    images, masks = slices_to_tensors(slices, architecture.input_size)
    val = slices_to_tensors(val_slices, architecture.input_size) if val_slices else None

    network = AutoEncoder(kind, architecture)
    if config.zero_init_output:
        network.zero_init_output()
    critics = CriticState(kind, architecture) if kind.adversarial else None
    model = TrainedModel(
        kind=kind,
        architecture=architecture,
        network=network,
        training_config=config,
        critics=critics,
        num_training_slices=len(slices),
        deterministic=config.threads == 1,
    )
    trainer = _Trainer(kind, network, critics, config, len(slices))

    best, stale = math.inf, 0
    log.info(f"Training {kind.value} on {len(slices)} slices, latent {architecture.latent_shape}")
    for epoch in tqdm(range(config.epochs), desc=kind.value, disable=not config.progress):
        order = torch.randperm(len(images), generator=trainer.generator)
        sums, batches = defaultdict(float), 0
        for start in range(0, len(images), config.batch_size):
            index = order[start:start + config.batch_size]
            for name, value in trainer.step(images[index], masks[index]).items():
                sums[name] += value
            batches += 1
        record = {name: value / batches for name, value in sums.items()}

        if val is not None:
            record["val_recon"] = trainer.validation_loss(*val)
        if not all(math.isfinite(v) for v in record.values()):
            checkpoint = None
            if diagnostic_dir is not None:
                from .checkpoint import save_checkpoint

                checkpoint = save_checkpoint(model, diagnostic_dir)
            raise DivergenceError(f"{kind.value} diverged in epoch {epoch}: {record}", checkpoint)
        model.loss_history.append(record)

        if val is not None:
            if record["val_recon"] < best * (1 - config.min_improvement):
                best, stale = record["val_recon"], 0
            else:
                stale += 1
            if stale >= config.patience:
                log.info(f"{kind.value}: no validation improvement for {stale} epochs, stopping at {epoch + 1}")
                break

    network.eval()
    if critics is not None:
        critics.eval()
    return model
