"""Checkpoints: every state tensor as a raster under ``params/`` plus ``checkpoint.json``.

``checkpoint.json`` holds kind, architecture, training config, seed, loss history and a
``parameters`` table mapping ``<module>.<tensor name>`` to its raster sidecar.
"""

import json
import logging
from pathlib import Path

import torch
import torch.nn as nn

from ..data import read_array, write_array
from ..errors import IntegrityError
from .architecture import Architecture, AutoEncoder, CriticState, DetectorKind
from .training import TrainConfig, TrainedModel

log = logging.getLogger("anomaly_bench.models.checkpoint")

CHECKPOINT_FILE = "checkpoint.json"
FORMAT_VERSION = 1


def write_state(directory: Path, prefix: str, module: nn.Module) -> dict:
    entries = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}.{name}"
        sidecar = write_array(directory / "params" / key, tensor.detach().cpu().numpy())
        entries[key] = {"file": f"params/{sidecar.name}", "shape": list(tensor.shape)}
    return entries


def read_state(directory: Path, entries: dict, prefix: str, module: nn.Module):
    state = {}
    for name, tensor in module.state_dict().items():
        key = f"{prefix}.{name}"
        if key not in entries:
            raise IntegrityError(f"Checkpoint {directory} lacks parameter {key}")
        array, _ = read_array(directory / entries[key]["file"])
        if tuple(array.shape) != tuple(tensor.shape):
            raise IntegrityError(f"Parameter {key} has shape {array.shape}, expected {tuple(tensor.shape)}")
        state[name] = torch.from_numpy(array).to(tensor.dtype)
    module.load_state_dict(state)


def read_manifest(directory: Path) -> dict:
    path = Path(directory) / CHECKPOINT_FILE
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as e:
        raise IntegrityError(f"No checkpoint at {directory}") from e
    except json.JSONDecodeError as e:
        raise IntegrityError(f"Checkpoint manifest {path} is not valid JSON: {e}") from e


def save_checkpoint(model: TrainedModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    parameters = write_state(directory, "network", model.network)
    if model.critics is not None:
        parameters.update(write_state(directory, "critics", model.critics))
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind.value,
        "architecture": model.architecture.to_dict(),
        "training_config": model.training_config.to_dict(),
        "seed": model.training_config.seed,
        "num_training_slices": model.num_training_slices,
        "deterministic": model.deterministic,
        "loss_history": model.loss_history,
        "parameters": parameters,
    }
    path = directory / CHECKPOINT_FILE
    path.write_text(json.dumps(manifest, indent=2))
    log.info(f"Saved {model} to {directory}")
    return path


def load_checkpoint(directory) -> TrainedModel:
    directory = Path(directory)
    manifest = read_manifest(directory)
    try:
        kind = DetectorKind(manifest["kind"])
        architecture = Architecture.from_dict(manifest["architecture"])
        config = TrainConfig.from_dict(manifest["training_config"])
        entries = manifest["parameters"]
    except (KeyError, TypeError, ValueError) as e:
        raise IntegrityError(f"Checkpoint {directory} is malformed: {e}") from e

    network = AutoEncoder(kind, architecture)
    read_state(directory, entries, "network", network)
    network.eval()
    critics = None
    if kind.adversarial:
        critics = CriticState(kind, architecture)
        read_state(directory, entries, "critics", critics)
        critics.eval()
    return TrainedModel(
        kind=kind,
        architecture=architecture,
        network=network,
        training_config=config,
        loss_history=list(manifest.get("loss_history", [])),
        critics=critics,
        num_training_slices=int(manifest.get("num_training_slices", 0)),
        deterministic=bool(manifest.get("deterministic", True)),
    )
