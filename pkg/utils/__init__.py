"""Utils package - checkpoints, paths, media I/O and numeric helpers"""
from .checkpoint import load_into, load_weights, save_weights
from .coordinate_utils import latent_size, restore_size, token_aligned_crop
from .gradcheck import GradCheckResult, check_gradients
from .media_utils import load_png, load_wav, save_png, save_wav
from .path_utils import checkpoint_dir, corpus_dir, require_checkpoint, resolve_output_root

__all__ = [
    'load_into',
    'load_weights',
    'save_weights',
    'latent_size',
    'restore_size',
    'token_aligned_crop',
    'GradCheckResult',
    'check_gradients',
    'load_png',
    'load_wav',
    'save_png',
    'save_wav',
    'checkpoint_dir',
    'corpus_dir',
    'require_checkpoint',
    'resolve_output_root',
]
