"""
Media I/O: PNG images, 16-bit PCM WAV audio and u16 token streams
"""
import logging
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
import soundfile as sf
import torch
import torch.nn.functional as F
from PIL import Image

from config import ShapeError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_png(path: PathLike) -> torch.Tensor:
    """
    Load an image as a float tensor (3, H, W) in [0, 1]

    RGBA and palette images are flattened onto white.
    """
    with Image.open(path) as image:
        if image.mode == 'RGBA':
            background = Image.new('RGB', image.size, (255, 255, 255))
            background.paste(image, mask=image.split()[3])
            image = background
        elif image.mode != 'RGB':
            image = image.convert('RGB')
        array = np.asarray(image, dtype=np.uint8)
    return torch.from_numpy(array.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def to_pil(pixels: torch.Tensor) -> Image.Image:
    """(3, H, W) float in [0, 1] -> 8-bit RGB PIL image"""
    if pixels.dim() != 3 or pixels.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) pixels, got {tuple(pixels.shape)}")
    array = (pixels.detach().to('cpu', torch.float32).clamp(0, 1) * 255.0).round().to(torch.uint8)
    return Image.fromarray(array.permute(1, 2, 0).numpy(), mode='RGB')


def save_png(pixels: torch.Tensor, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_pil(pixels).save(path, format='PNG')
    return path


def resize_pixels(pixels: torch.Tensor, size_hw: Tuple[int, int]) -> torch.Tensor:
    """Bilinear resample of (C, H, W) or (B, C, H, W) to size (H, W)"""
    batched = pixels.dim() == 4
    x = pixels if batched else pixels.unsqueeze(0)
    if tuple(x.shape[-2:]) != tuple(size_hw):
        x = F.interpolate(x, size=tuple(size_hw), mode='bilinear', align_corners=False)
    return x if batched else x.squeeze(0)


def load_wav(path: PathLike, expected_rate: int) -> torch.Tensor:
    """Load a mono WAV as float32 samples in [-1, 1]"""
    data, rate = sf.read(str(path), dtype='float32', always_2d=True)
    if rate != expected_rate:
        raise ShapeError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (resample first)")
    return torch.from_numpy(data.mean(axis=1).astype(np.float32))


def save_wav(samples: torch.Tensor, path: PathLike, sample_rate: int) -> Path:
    """Write 16-bit PCM mono WAV"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = samples.detach().to('cpu', torch.float32).clamp(-1.0, 1.0).numpy()
    sf.write(str(path), data, sample_rate, subtype='PCM_16', format='WAV')
    return path


def encode_u16_stream(ids: Sequence[int]) -> bytes:
    """Serialize ids as unsigned 16-bit little-endian integers"""
    array = np.asarray(list(ids), dtype=np.int64)
    if array.size and (array.min() < 0 or array.max() > 0xFFFF):
        raise ShapeError("ids do not fit in unsigned 16 bits")
    return array.astype('<u2').tobytes()


def decode_u16_stream(payload: bytes) -> np.ndarray:
    if len(payload) % 2:
        raise ShapeError("u16 stream has odd byte length")
    return np.frombuffer(payload, dtype='<u2').astype(np.int64)


def write_u16_stream(ids: Sequence[int], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_u16_stream(ids))
    return path


def read_u16_stream(path: PathLike) -> np.ndarray:
    return decode_u16_stream(Path(path).read_bytes())
