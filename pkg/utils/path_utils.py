"""
Path utilities for run directories, stage checkpoints and corpus assets
"""
import os
import logging
from pathlib import Path
from typing import Optional

from config import get_config, CheckpointError

logger = logging.getLogger(__name__)

def resolve_output_root(output_dir: Optional[str] = None) -> Path:
    """
    Resolve the directory all run artifacts are written under

    Priority:
        1. Explicit ``output_dir`` (CLI ``--out`` or config.json ``output_dir``)
        2. ``OMNISTACK_HOME`` environment variable
        3. ``./omnistack_runs``

    Args:
        output_dir: Optional explicit directory

    Returns:
        Absolute path (not created)
    """
    if output_dir:
        return Path(output_dir).expanduser().resolve()
    env_home = os.getenv('OMNISTACK_HOME')
    if env_home:
        return Path(env_home).expanduser().resolve()
    return Path(get_config().OMNISTACK_HOME).expanduser().resolve()

def checkpoint_dir(root: Path, stage_name: str) -> Path:
    return root / get_config().CHECKPOINT_DIRNAME / stage_name

def corpus_dir(root: Path) -> Path:
    return root / get_config().CORPUS_DIRNAME

def require_checkpoint(root: Path, stage_name: str) -> Path:
    """
    Return the checkpoint directory of a finished stage, or raise

    Args:
        root: Run output root
        stage_name: Stage whose checkpoint must exist

    Returns:
        Path of the checkpoint directory
    """
    path = checkpoint_dir(root, stage_name)
    if not (path / 'manifest.json').is_file():
        raise CheckpointError(f"missing checkpoint for stage '{stage_name}' under {path}")
    return path

