"""
Model checkpoints: named float64 parameter blocks in a safetensors file, with a
TOML header (format version, completed phases, config, checksum) as metadata.
"""
import hashlib
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import tomli_w
from safetensors import SafetensorError, safe_open
from safetensors.numpy import save_file

from contextedit.config import CHECKPOINT_FORMAT_VERSION, REFERENCE_ITERATIONS, Phase, TrainConfig
from contextedit.errors import CheckpointError
from contextedit.model import EditingModel
from contextedit.nn import Module

HEADER_KEY = "header"


def checksum(blocks: dict[str, np.ndarray]) -> str:
    """sha256 over name, shape and bytes of every block, in name order."""
    digest = hashlib.sha256()
    for name in sorted(blocks):
        data = np.ascontiguousarray(blocks[name], dtype=np.float64)
        digest.update(name.encode())
        digest.update(str(data.shape).encode())
        digest.update(data.tobytes())
    return digest.hexdigest()


def parameter_digest(module: Module) -> str:
    """Content hash of a module's parameters, for checking what a phase may change."""
    return checksum({name: p.data for name, p in module.named_parameters()})


@dataclass
class CheckpointInfo:
    path: Path
    phases: list[Phase]
    config: TrainConfig
    checksum: str
    trainable: dict[str, bool]


def save_checkpoint(model: EditingModel, path: Path, phases: Iterable[Phase]) -> str:
    """Write every parameter block of `model`; returns the content checksum."""
    parameters = dict(model.named_parameters())
    blocks = {name: np.ascontiguousarray(p.data) for name, p in parameters.items()}
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "phases": [phase.value for phase in phases],
        "checksum": checksum(blocks),
        "config": model.config.as_dict(),
        "trainable": {name: p.requires_grad for name, p in parameters.items()},
        "provenance": {"reference_iterations": dict(REFERENCE_ITERATIONS)},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(blocks, str(path), metadata={HEADER_KEY: tomli_w.dumps(header)})
    return header["checksum"]


def _read(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    if not path.is_file():
        raise CheckpointError(f"Checkpoint '{path}' does not exist")
    try:
        with safe_open(str(path), framework="numpy") as f:
            metadata = f.metadata() or {}
            blocks = {name: f.get_tensor(name) for name in f.keys()}
    except (SafetensorError, OSError) as e:
        raise CheckpointError(f"'{path}' is not a readable checkpoint: {e}") from e
    if HEADER_KEY not in metadata:
        raise CheckpointError(f"'{path}' has no checkpoint header")
    try:
        header = tomllib.loads(metadata[HEADER_KEY])
    except tomllib.TOMLDecodeError as e:
        raise CheckpointError(f"Can't parse the header of '{path}': {e}") from e
    return header, blocks


def read_info(path: Path) -> tuple[CheckpointInfo, dict[str, np.ndarray]]:
    """Validate a checkpoint file and return its header and parameter blocks."""
    header, blocks = _read(path)
    version = header.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint format version {version!r} isn't supported (expected {CHECKPOINT_FORMAT_VERSION!r})"
        )
    if checksum(blocks) != header.get("checksum"):
        raise CheckpointError(f"Checksum mismatch in '{path}'; the file is corrupt or was modified")
    try:
        phases = [Phase(value) for value in header.get("phases", [])]
        config = TrainConfig.from_dict(header.get("config", {}))
    except ValueError as e:
        raise CheckpointError(f"Invalid header in '{path}': {e}") from e
    info = CheckpointInfo(
        path=path,
        phases=phases,
        config=config,
        checksum=header["checksum"],
        trainable=dict(header.get("trainable", {})),
    )
    return info, blocks


def load_checkpoint(path: Path) -> tuple[EditingModel, CheckpointInfo]:
    """Rebuild the model from the stored config and fill in every parameter block."""
    info, blocks = read_info(path)
    model = EditingModel(info.config)
    parameters = dict(model.named_parameters())
    if missing := sorted(set(parameters) - set(blocks)):
        raise CheckpointError(f"Checkpoint lacks parameter blocks: {', '.join(missing[:5])}")
    if unexpected := sorted(set(blocks) - set(parameters)):
        raise CheckpointError(f"Checkpoint has unexpected parameter blocks: {', '.join(unexpected[:5])}")
    for name, tensor in parameters.items():
        if blocks[name].shape != tensor.shape:
            raise CheckpointError(
                f"Block '{name}' has shape {blocks[name].shape}, model expects {tensor.shape}"
            )
        tensor.data = np.array(blocks[name], dtype=np.float64)
        tensor.requires_grad = info.trainable.get(name, tensor.requires_grad)
    return model, info
