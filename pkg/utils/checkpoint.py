"""
Bit-exact weight checkpoints

A checkpoint is a directory holding
  manifest.json  array name -> {dtype, shape, offset, length}
  weights.bin    concatenated little-endian IEEE-754 float32, row-major
"""
import json
import logging
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import torch

from config import CheckpointError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
WEIGHTS_NAME = 'weights.bin'
_DTYPE = '<f4'


def save_weights(state: Mapping[str, torch.Tensor], directory: Path) -> Path:
    """
    Write a state dict in the flat checkpoint format

    Every tensor is cast to float32; names are written in sorted order so the
    byte layout only depends on the state itself.

    Args:
        state: name -> tensor
        directory: Target directory (created if needed)

    Returns:
        The checkpoint directory
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    manifest = {}
    offset = 0
    with open(directory / WEIGHTS_NAME, 'wb') as f:
        for name in sorted(state):
            array = np.ascontiguousarray(
                state[name].detach().to('cpu', torch.float32).numpy(), dtype=_DTYPE
            )
            payload = array.tobytes(order='C')
            f.write(payload)
            manifest[name] = {
                'dtype': 'float32',
                'shape': list(array.shape),
                'offset': offset,
                'length': len(payload),
            }
            offset += len(payload)

    with open(directory / MANIFEST_NAME, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)

    logger.info(f"✓ Saved {len(manifest)} arrays ({offset} bytes) to {directory}")
    return directory


def load_weights(directory: Path) -> Dict[str, torch.Tensor]:
    """
    Read a checkpoint written by save_weights

    Returns:
        name -> float32 tensor, bit-identical to what was saved
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    weights_path = directory / WEIGHTS_NAME
    if not manifest_path.is_file() or not weights_path.is_file():
        raise CheckpointError(f"not a checkpoint directory: {directory}")

    with open(manifest_path, 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    blob = weights_path.read_bytes()

    state = {}
    for name, entry in manifest.items():
        if entry.get('dtype') != 'float32':
            raise CheckpointError(f"unsupported dtype for {name}: {entry.get('dtype')}")
        start, length = entry['offset'], entry['length']
        if start + length > len(blob):
            raise CheckpointError(f"array {name} runs past the end of {WEIGHTS_NAME}")
        array = np.frombuffer(blob, dtype=_DTYPE, count=length // 4, offset=start)
        state[name] = torch.from_numpy(array.reshape(entry['shape']).astype(np.float32))
    return state


def load_into(module: torch.nn.Module, directory: Path, prefix: str = '', strict: bool = True) -> None:
    """Load a checkpoint into a module, casting to each parameter's dtype"""
    state = load_weights(directory)
    if prefix:
        state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    target = module.state_dict()
    missing = [k for k in target if k not in state]
    if strict and missing:
        raise CheckpointError(f"checkpoint {directory} lacks {len(missing)} arrays, e.g. {missing[:3]}")
    cast = {k: v.to(target[k].dtype) for k, v in state.items() if k in target}
    module.load_state_dict(cast, strict=strict)
