"""Shared convolutional encoder/decoder and the adversarial critics.

Encoder stages are 4x4 stride-2 convolutions; the decoder mirrors them with transposed
convolutions. A spatial latent is a 3x3 convolution of the last feature map, a flat
latent a dense layer on it.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import torch
import torch.nn as nn

from ..errors import ConfigError
from .bayes import BayesianConv2d, BayesianConvTranspose2d, BayesianLinear, weight_kl


class DetectorKind(str, Enum):
    AE = "ae"
    DAE = "dae"
    VAE = "vae"
    VAE_BBB = "vae_bbb"
    AAE = "aae"
    ALPHA_GAN = "alpha_gan"

    @property
    def variational(self) -> bool:
        return self in (DetectorKind.VAE, DetectorKind.VAE_BBB)

    @property
    def bayesian(self) -> bool:
        return self is DetectorKind.VAE_BBB

    @property
    def adversarial(self) -> bool:
        return self in (DetectorKind.AAE, DetectorKind.ALPHA_GAN)


class LatentLayout(str, Enum):
    SPATIAL = "spatial"
    FLAT = "flat"


@dataclass(frozen=True)
class Architecture:
    input_size: int
    channel_schedule: tuple[int, ...] = (32, 64, 128, 128)
    latent_layout: LatentLayout = LatentLayout.SPATIAL
    latent_channels: int = 64
    latent_dim: int = 256

    def __post_init__(self):
        object.__setattr__(self, "channel_schedule", tuple(int(c) for c in self.channel_schedule))
        object.__setattr__(self, "latent_layout", LatentLayout(self.latent_layout))
        if self.input_size <= 0 or self.input_size % (2**self.stages):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2^{self.stages} encoder stages"
            )

    @property
    def stages(self) -> int:
        return len(self.channel_schedule)

    @property
    def feature_size(self) -> int:
        return self.input_size // 2**self.stages

    @property
    def feature_channels(self) -> int:
        return self.channel_schedule[-1] if self.channel_schedule else 1

    @property
    def latent_shape(self) -> tuple[int, ...]:
        if self.latent_layout is LatentLayout.SPATIAL:
            return (self.feature_size, self.feature_size, self.latent_channels)
        return (self.latent_dim,)

    @classmethod
    def for_input(cls, input_size: int, layout: LatentLayout = LatentLayout.SPATIAL, latent_dim: int = 256) -> "Architecture":
        """Six stages at 128/256 give latents (2,2,64)/(4,4,64); four stages give the same at 32/64."""
        if input_size >= 128:
            schedule = (16, 32, 64, 64, 128, 128)
        else:
            schedule = (32, 64, 128, 128)
        return cls(input_size, schedule, LatentLayout(layout), latent_dim=latent_dim)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["channel_schedule"] = list(self.channel_schedule)
        payload["latent_layout"] = self.latent_layout.value
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "Architecture":
        return cls(**payload)


class LayerFactory:
    def __init__(self, bayesian: bool = False, prior_std: float = 1.0):
        self.bayesian = bayesian
        self.prior_std = prior_std

    def conv(self, in_channels, out_channels, kernel_size, stride=1, padding=0) -> nn.Module:
        if self.bayesian:
            return BayesianConv2d(in_channels, out_channels, kernel_size, stride, padding, self.prior_std)
        return nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding)

    def deconv(self, in_channels, out_channels, kernel_size, stride=1, padding=0) -> nn.Module:
        if self.bayesian:
            return BayesianConvTranspose2d(in_channels, out_channels, kernel_size, stride, padding, self.prior_std)
        return nn.ConvTranspose2d(in_channels, out_channels, kernel_size, stride, padding)

    def linear(self, in_features, out_features) -> nn.Module:
        if self.bayesian:
            return BayesianLinear(in_features, out_features, self.prior_std)
        return nn.Linear(in_features, out_features)


def _feature_stack(arch: Architecture, layers: LayerFactory) -> nn.Sequential:
    blocks, channels = [], 1
    for out in arch.channel_schedule:
        blocks += [layers.conv(channels, out, 4, 2, 1), nn.LeakyReLU(0.2)]
        channels = out
    return nn.Sequential(*blocks)


class Encoder(nn.Module):
    def __init__(self, arch: Architecture, layers: LayerFactory, variational: bool):
        super().__init__()
        self.arch = arch
        self.features = _feature_stack(arch, layers)
        flat_features = arch.feature_channels * arch.feature_size**2
        if arch.latent_layout is LatentLayout.SPATIAL:
            def head():
                return layers.conv(arch.feature_channels, arch.latent_channels, 3, 1, 1)
        else:
            def head():
                return nn.Sequential(nn.Flatten(), layers.linear(flat_features, arch.latent_dim))
        self.mean_head = head()
        self.log_variance_head = head() if variational else None

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        h = self.features(x)
        log_variance = self.log_variance_head(h) if self.log_variance_head is not None else None
        return self.mean_head(h), log_variance


class Decoder(nn.Module):
    def __init__(self, arch: Architecture, layers: LayerFactory):
        super().__init__()
        self.arch = arch
        size, channels = arch.feature_size, arch.feature_channels
        if arch.latent_layout is LatentLayout.SPATIAL:
            head = [layers.conv(arch.latent_channels, channels, 3, 1, 1)]
        else:
            head = [layers.linear(arch.latent_dim, channels * size**2), nn.Unflatten(1, (channels, size, size))]
        blocks = head
        schedule = arch.channel_schedule
        for i in reversed(range(arch.stages)):
            out = schedule[i - 1] if i > 0 else 1
            blocks += [nn.LeakyReLU(0.2), layers.deconv(schedule[i], out, 4, 2, 1)]
        self.body = nn.Sequential(*blocks)

    @property
    def output_layer(self) -> nn.Module:
        layers = [m for m in self.body if not isinstance(m, (nn.LeakyReLU, nn.Unflatten))]
        return layers[-1]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.body(z)


class AutoEncoder(nn.Module):
    def __init__(self, kind: DetectorKind, arch: Architecture, prior_std: float = 1.0):
        super().__init__()
        self.kind = DetectorKind(kind)
        self.arch = arch
        layers = LayerFactory(bayesian=self.kind.bayesian, prior_std=prior_std)
        self.encoder = Encoder(arch, layers, variational=self.kind.variational)
        self.decoder = Decoder(arch, layers)

    def encode_distribution(self, x: torch.Tensor) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        return self.encoder(x)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)[0]

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def reconstruct(self, x: torch.Tensor) -> torch.Tensor:
        """Decode the latent mean."""
        return self.decode(self.encode(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.reconstruct(x)

    def weight_kl(self) -> torch.Tensor:
        return weight_kl(self)

    def zero_init_output(self):
        """Zero the output layer weights so every pixel starts at the output bias."""
        layer = self.decoder.output_layer
        with torch.no_grad():
            for name, param in layer.named_parameters():
                if name in ("weight", "weight_mu"):
                    param.zero_()
                elif name == "weight_log_sigma":
                    param.fill_(-30.0)


class LatentCritic(nn.Module):
    def __init__(self, latent_numel: int, hidden: int = 256):
        super().__init__()
        self.body = nn.Sequential(
            nn.Flatten(),
            nn.Linear(latent_numel, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def forward(self, z):
        return self.body(z)


class ImageCritic(nn.Module):
    """Scores real slices against reconstructions; no normalization layers (gradient penalty)."""

    def __init__(self, arch: Architecture):
        super().__init__()
        self.features = _feature_stack(arch, LayerFactory())
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(arch.feature_channels * arch.feature_size**2, 1))

    def forward(self, x):
        return self.head(self.features(x))


class CriticState(nn.Module):
    def __init__(self, kind: DetectorKind, arch: Architecture, hidden: int = 256):
        super().__init__()
        kind = DetectorKind(kind)
        if not kind.adversarial:
            raise ConfigError(f"{kind.value} has no critics")
        numel = 1
        for d in arch.latent_shape:
            numel *= d
        self.latent = LatentCritic(numel, hidden)
        self.reconstruction = ImageCritic(arch) if kind is DetectorKind.ALPHA_GAN else None
