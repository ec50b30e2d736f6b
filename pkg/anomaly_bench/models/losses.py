from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch

from ..errors import ContractError
from .architecture import AutoEncoder, CriticState, DetectorKind


def _masked(diff: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    return diff if mask is None else diff * mask


def recon_loss(x: torch.Tensor, x_rec: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Euclidean norm of the in-mask difference, averaged over the batch dimension.

    A 2D input is treated as a single image.
    """
    diff = _masked(x - x_rec, mask)
    flat = diff.reshape(1, -1) if diff.dim() <= 2 else diff.reshape(diff.shape[0], -1)
    return torch.linalg.vector_norm(flat, ord=2, dim=1).mean()


def kl_diag_gaussian(mean: torch.Tensor, log_variance: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(log_variance)) || N(0, I)) summed over every entry."""
    return 0.5 * torch.sum(torch.exp(log_variance) + mean**2 - 1.0 - log_variance)


def reparameterize(mean, log_variance, generator=None) -> tuple[torch.Tensor, torch.Tensor]:
    epsilon = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
    return mean + torch.exp(0.5 * log_variance) * epsilon, epsilon


def corrupt(x: torch.Tensor, mask: Optional[torch.Tensor], sigma: float, generator=None) -> torch.Tensor:
    """Add N(0, sigma^2) noise to in-mask pixels."""
    if sigma < 0:
        raise ContractError(f"Noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return x
    noise = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device) * sigma
    return x + _masked(noise, mask)


class ElboTerms(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor
    weight_kl: torch.Tensor


def elbo_loss(
    model: AutoEncoder,
    x: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    beta: float = 1.0,
    num_training_slices: int = 1,
    generator=None,
) -> ElboTerms:
    """Negative ELBO per slice under a unit-variance Gaussian decoder.

    ``weight_kl`` is the weight-posterior KL of a Bayesian model scaled by
    ``1 / num_training_slices``; it is zero for the plain VAE.
    """
    if not model.kind.variational:
        raise ContractError(f"elbo_loss needs a variational model, got {model.kind.value}")
    batch = x.shape[0]
    mean, log_variance = model.encode_distribution(x)
    z, _ = reparameterize(mean, log_variance, generator)
    x_rec = model.decode(z)
    recon = 0.5 * torch.sum(_masked(x - x_rec, mask) ** 2) / batch
    kl = kl_diag_gaussian(mean, log_variance) / batch
    if model.kind.bayesian:
        weight = model.weight_kl() / num_training_slices
    else:
        weight = torch.zeros((), dtype=x.dtype, device=x.device)
    return ElboTerms(recon + beta * kl + weight, recon, kl, weight)


def gradient_penalty(critic, z_real: torch.Tensor, z_fake: torch.Tensor, generator=None) -> torch.Tensor:
    """mean((||grad critic(z_hat)||_2 - 1)^2) on random interpolates of real/fake pairs."""
    batch = z_real.shape[0]
    alpha = torch.rand(
        (batch,) + (1,) * (z_real.dim() - 1), generator=generator, dtype=z_real.dtype, device=z_real.device
    )
    z_hat = (alpha * z_real.detach() + (1 - alpha) * z_fake.detach()).requires_grad_(True)
    scores = critic(z_hat)
    if scores.requires_grad:
        (grads,) = torch.autograd.grad(scores.sum(), z_hat, create_graph=True, allow_unused=True)
    else:
        grads = None
    if grads is None:
        grads = torch.zeros_like(z_hat)
    norms = grads.reshape(batch, -1).norm(2, dim=1)
    return torch.mean((norms - 1.0) ** 2)


def wgan_gp_critic_loss(critic, z_real, z_fake, gp_coeff: float = 10.0, generator=None) -> torch.Tensor:
    wasserstein = critic(z_fake.detach()).mean() - critic(z_real.detach()).mean()
    return wasserstein + gp_coeff * gradient_penalty(critic, z_real, z_fake, generator)


@dataclass(frozen=True)
class AdversarialWeights:
    recon: float = 1.0
    latent: float = 1.0
    image: float = 1.0


class AaeLosses(NamedTuple):
    autoencoder: torch.Tensor
    recon: torch.Tensor
    latent_critic: torch.Tensor


class AlphaGanLosses(NamedTuple):
    encoder: torch.Tensor
    generator: torch.Tensor
    latent_critic: torch.Tensor
    recon_critic: torch.Tensor
    recon: torch.Tensor


def aae_losses(
    model: AutoEncoder,
    critics: CriticState,
    x: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    gp_coeff: float = 10.0,
    weights: AdversarialWeights = AdversarialWeights(),
    generator=None,
) -> AaeLosses:
    """Auto-encoder objective plus adversarial matching of Q(z) to N(0, I)."""
    if model.kind is not DetectorKind.AAE:
        raise ContractError(f"aae_losses needs an AAE, got {model.kind.value}")
    z = model.encode(x)
    x_rec = model.decode(z)
    prior = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    recon = recon_loss(x, x_rec, mask)
    critic_loss = wgan_gp_critic_loss(critics.latent, prior, z, gp_coeff, generator)
    autoencoder = weights.recon * recon - weights.latent * critics.latent(z).mean()
    return AaeLosses(autoencoder, recon, critic_loss)


def alpha_gan_losses(
    model: AutoEncoder,
    critics: CriticState,
    x: torch.Tensor,
    mask: Optional[torch.Tensor] = None,
    gp_coeff: float = 10.0,
    weights: AdversarialWeights = AdversarialWeights(),
    generator=None,
) -> AlphaGanLosses:
    """Latent critic as in the AAE plus an image critic on slices against reconstructions.

    The encoder minimizes reconstruction plus the latent adversarial term, the generator
    (decoder) reconstruction plus the image adversarial term.
    """
    if model.kind is not DetectorKind.ALPHA_GAN:
        raise ContractError(f"alpha_gan_losses needs an alpha-GAN, got {model.kind.value}")
    z = model.encode(x)
    x_rec = _masked(model.decode(z), mask)
    prior = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    real = _masked(x, mask)
    recon = recon_loss(x, x_rec, mask)

    latent_critic = wgan_gp_critic_loss(critics.latent, prior, z, gp_coeff, generator)
    recon_critic = wgan_gp_critic_loss(critics.reconstruction, real, x_rec, gp_coeff, generator)
    encoder = weights.recon * recon - weights.latent * critics.latent(z).mean()
    generator_loss = weights.recon * recon - weights.image * critics.reconstruction(x_rec).mean()
    return AlphaGanLosses(encoder, generator_loss, latent_critic, recon_critic, recon)
