from .architecture import (
    Architecture,
    AutoEncoder,
    CriticState,
    DetectorKind,
    LatentLayout,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .inference import LatentCode, anomaly_map, encode, reconstruct
from .losses import (
    AdversarialWeights,
    aae_losses,
    alpha_gan_losses,
    corrupt,
    elbo_loss,
    gradient_penalty,
    kl_diag_gaussian,
    recon_loss,
    wgan_gp_critic_loss,
)
from .training import TrainConfig, TrainedModel, train

__all__ = [
    "AdversarialWeights",
    "Architecture",
    "AutoEncoder",
    "CriticState",
    "DetectorKind",
    "LatentCode",
    "LatentLayout",
    "TrainConfig",
    "TrainedModel",
    "aae_losses",
    "alpha_gan_losses",
    "anomaly_map",
    "corrupt",
    "elbo_loss",
    "encode",
    "gradient_penalty",
    "kl_diag_gaussian",
    "load_checkpoint",
    "reconstruct",
    "recon_loss",
    "save_checkpoint",
    "train",
    "wgan_gp_critic_loss",
]
