"""U-Net segmentation reference trained on labeled slices."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .data import GroundTruth, Slice
from .errors import ConfigError, DegenerateLabelError, IntegrityError, ValidationError
from .evaluation import DifferenceMap
from .models.checkpoint import CHECKPOINT_FILE, FORMAT_VERSION, read_manifest, read_state, write_state
from .models.training import slices_to_tensors

log = logging.getLogger("anomaly_bench.supervised")

UNET_KIND = "unet"


@dataclass(frozen=True)
class UNetConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-3
    depth: int = 3
    base_channels: int = 16
    threads: Optional[int] = 1
    progress: bool = False

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigError(f"U-Net needs depth >= 1 and base_channels >= 1, got {self.depth}/{self.base_channels}")

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload.pop("progress")
        return payload


def _double_conv(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_channels, out_channels, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """``depth`` pooling levels; level ``i`` of the decoder concatenates encoder level ``i``."""

    def __init__(self, depth: int = 3, base_channels: int = 16):
        super().__init__()
        self.depth = depth
        widths = [base_channels * 2**i for i in range(depth + 1)]
        self.down = nn.ModuleList([_double_conv(1, widths[0])])
        self.down.extend(_double_conv(widths[i], widths[i + 1]) for i in range(depth))
        self.up = nn.ModuleList(nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(depth)))
        self.merge = nn.ModuleList(_double_conv(2 * widths[i], widths[i]) for i in reversed(range(depth)))
        self.head = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 2**self.depth or x.shape[-2] % 2**self.depth:
            raise ValidationError(f"U-Net input {tuple(x.shape[-2:])} is not divisible by 2^{self.depth}")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x if i == 0 else F.max_pool2d(x, 2))
            skips.append(x)
        x = skips.pop()
        for up, merge in zip(self.up, self.merge):
            x = merge(torch.cat([skips.pop(), up(x)], dim=1))
        return self.head(x)


@dataclass(eq=False)
class UNetModel:
    network: UNet
    input_size: int
    training_config: UNetConfig
    loss_history: list[float] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return self.network.depth

    def __str__(self):
        return f"unet depth {self.depth} ({len(self.loss_history)} epochs)"


def masked_bce(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over in-mask pixels."""
    losses = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return (losses * mask).sum() / mask.sum().clamp_min(1.0)


def train_unet(slices: Sequence[Slice], labels: Sequence[GroundTruth], config: UNetConfig = UNetConfig()) -> UNetModel:
    if len(slices) != len(labels):
        raise ValidationError(f"{len(slices)} slices but {len(labels)} label maps")
    input_size = slices[0].shape[0] if slices else 0
    images, masks = slices_to_tensors(slices, input_size)
    targets = torch.from_numpy(np.stack([gt.labels for gt in labels])[:, None].astype(np.float32))
    if targets.shape != images.shape:
        raise ValidationError(f"Labels {tuple(targets.shape)} do not match slices {tuple(images.shape)}")
    if not (targets * masks).any():
        raise DegenerateLabelError("Training labels contain no positive in-mask pixels")

    if config.threads:
        torch.set_num_threads(config.threads)
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    network = UNet(config.depth, config.base_channels)
    optimizer = torch.optim.Adam(network.parameters(), lr=config.learning_rate)
    model = UNetModel(network, input_size, config)

    log.info(f"Training U-Net on {len(slices)} labeled slices")
    network.train()
    for _ in tqdm(range(config.epochs), desc=UNET_KIND, disable=not config.progress):
        order = torch.randperm(len(images), generator=generator)
        total = 0.0
        for start in range(0, len(images), config.batch_size):
            index = order[start:start + config.batch_size]
            loss = masked_bce(network(images[index]), targets[index], masks[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item() * len(index)
        model.loss_history.append(total / len(images))
    network.eval()
    return model


@torch.no_grad()
def predict(model: UNetModel, slice: Slice) -> DifferenceMap:
    """Foreground probability per pixel, zero outside the mask."""
    if slice.shape != (model.input_size, model.input_size):
        raise ValidationError(f"Slice {slice} has shape {slice.shape}, U-Net expects {model.input_size}")
    x = torch.from_numpy(slice.pixels)[None, None]
    probability = torch.sigmoid(model.network(x))[0, 0].numpy().astype(np.float64)
    probability[~slice.mask] = 0.0
    return DifferenceMap(np.clip(probability, 0.0, 1.0), slice.mask, source=UNET_KIND)


def save_unet(model: UNetModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": UNET_KIND,
        "input_size": model.input_size,
        "training_config": model.training_config.to_dict(),
        "seed": model.training_config.seed,
        "loss_history": model.loss_history,
        "parameters": write_state(directory, "network", model.network),
    }
    path = directory / CHECKPOINT_FILE
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_unet(directory) -> UNetModel:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if manifest.get("kind") != UNET_KIND:
        raise IntegrityError(f"Checkpoint {directory} holds {manifest.get('kind')!r}, not a U-Net")
    try:
        config = UNetConfig(**manifest["training_config"])
        input_size = int(manifest["input_size"])
    except (KeyError, TypeError) as e:
        raise IntegrityError(f"U-Net checkpoint {directory} is malformed: {e}") from e
    network = UNet(config.depth, config.base_channels)
    read_state(directory, manifest["parameters"], "network", network)
    network.eval()
    return UNetModel(network, input_size, config, list(manifest.get("loss_history", [])))
