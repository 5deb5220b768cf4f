"""
Semantic vision tokenizer (toy stand-in)

Images are resized to a 384x384 square, encoded into patch features at stride
16 (24x24), average-pooled to the 27x27 token grid and vector-quantized
against a codebook kept by exponential moving averages.
"""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from config import ShapeError, VisionTokenizerConfig
from utils.media_utils import resize_pixels

logger = logging.getLogger(__name__)


@dataclass
class ImageBuffer:
    """RGB pixels (3, H, W) in [0, 1] plus the aspect recorded before any resize"""
    pixels: torch.Tensor
    original_size: Optional[Tuple[int, int]] = None  # (width, height)

    def __post_init__(self):
        if self.pixels.dim() != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"ImageBuffer needs (3, H, W) pixels, got {tuple(self.pixels.shape)}")
        if self.pixels.shape[1] < 1 or self.pixels.shape[2] < 1:
            raise ShapeError("degenerate (zero-area) image")
        if self.original_size is None:
            self.original_size = (self.width, self.height)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def original_aspect(self) -> Fraction:
        return Fraction(*self.original_size)


@dataclass
class VisionTokenGrid:
    """grid x grid codebook-local ids, row-major"""
    ids: torch.Tensor
    codebook_size: int
    original_size: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.ids.dim() != 2 or self.ids.shape[0] != self.ids.shape[1]:
            raise ShapeError(f"token grid must be square, got {tuple(self.ids.shape)}")
        if self.ids.numel() and (int(self.ids.max()) >= self.codebook_size or int(self.ids.min()) < 0):
            raise ShapeError(f"token id outside codebook of size {self.codebook_size}")

    def flat(self) -> list:
        return [int(i) for i in self.ids.reshape(-1)]

    @classmethod
    def from_flat(cls, ids: Sequence[int], codebook_size: int, grid: int = 27,
                  original_size: Optional[Tuple[int, int]] = None) -> 'VisionTokenGrid':
        if len(ids) != grid * grid:
            raise ShapeError(f"expected {grid * grid} vision ids, got {len(ids)}")
        tensor = torch.as_tensor(list(ids), dtype=torch.long).reshape(grid, grid)
        return cls(ids=tensor, codebook_size=codebook_size, original_size=original_size)


@dataclass
class FeatureGrid:
    """grid x grid x C continuous features"""
    values: torch.Tensor

    def channels_first(self) -> torch.Tensor:
        return rearrange(self.values, 'h w c -> c h w')


def resize_square(image: ImageBuffer, size: int = 384) -> ImageBuffer:
    """
    Bilinear resample to size x size, keeping the original (width, height)
    for the decoder to restore
    """
    pixels = resize_pixels(image.pixels, (size, size))
    return ImageBuffer(pixels=pixels, original_size=image.original_size)


class VisionTokenizer(nn.Module):
    """Patch encoder + EMA vector quantizer + small feature-to-pixel head"""

    def __init__(self, cfg: VisionTokenizerConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.feature_dim
        self.patch = nn.Conv2d(3, c, kernel_size=cfg.patch_stride, stride=cfg.patch_stride)
        self.mix = nn.Sequential(nn.GELU(), nn.Conv2d(c, c, kernel_size=1))
        self.head = nn.Conv2d(c, 3, kernel_size=3, padding=1)
        self.register_buffer('codebook', torch.randn(cfg.codebook_size, c) * 0.5)
        self.register_buffer('ema_count', torch.ones(cfg.codebook_size))
        self.register_buffer('ema_sum', self.codebook.clone())
        self.frozen = False

    # -- encoding ---------------------------------------------------------

    def encode_features(self, pixels: torch.Tensor) -> torch.Tensor:
        """(B, 3, S, S) -> (B, C, grid, grid) continuous features"""
        s = self.cfg.image_size
        if pixels.dim() != 4 or tuple(pixels.shape[1:]) != (3, s, s):
            raise ShapeError(f"tokenizer expects (B, 3, {s}, {s}), got {tuple(pixels.shape)}")
        features = self.mix(self.patch(pixels))
        return F.adaptive_avg_pool2d(features, self.cfg.grid)

    def nearest_codes(self, features: torch.Tensor) -> torch.Tensor:
        """(B, C, g, g) -> (B, g, g) nearest-codebook ids"""
        flat = rearrange(features, 'b c h w -> (b h w) c')
        codebook = self.codebook.to(flat.dtype)
        distances = (
            flat.pow(2).sum(1, keepdim=True)
            - 2 * flat @ codebook.t()
            + codebook.pow(2).sum(1).unsqueeze(0)
        )
        ids = distances.argmin(dim=1)
        b, _, h, w = features.shape
        return ids.view(b, h, w)

    def lookup(self, ids: torch.Tensor) -> torch.Tensor:
        """(B, g, g) ids -> (B, C, g, g) codebook vectors"""
        return rearrange(F.embedding(ids, self.codebook), 'b h w c -> b c h w')

    @torch.no_grad()
    def tokenize(self, image: ImageBuffer) -> VisionTokenGrid:
        """384x384 image -> 27x27 token grid"""
        ids = self.nearest_codes(self.encode_features(image.pixels.unsqueeze(0).to(self.codebook.dtype)))[0]
        return VisionTokenGrid(ids=ids.cpu(), codebook_size=self.cfg.codebook_size,
                               original_size=image.original_size)

    def tokenize_any(self, image: ImageBuffer) -> VisionTokenGrid:
        """Resize to the square working resolution, then tokenize"""
        return self.tokenize(resize_square(image, self.cfg.image_size))

    @torch.no_grad()
    def detokenize(self, grid: VisionTokenGrid) -> FeatureGrid:
        if grid.codebook_size != self.cfg.codebook_size:
            raise ShapeError(f"grid codebook {grid.codebook_size} != tokenizer codebook {self.cfg.codebook_size}")
        ids = grid.ids.to(self.codebook.device)
        if int(ids.max()) >= self.cfg.codebook_size:
            raise ShapeError("token id out of codebook range")
        return FeatureGrid(values=F.embedding(ids, self.codebook))

    # -- training ---------------------------------------------------------

    def forward(self, pixels: torch.Tensor):
        """
        Returns:
            (reconstruction at grid resolution, straight-through quantized
            features, pre-quantization features, ids)
        """
        features = self.encode_features(pixels)
        ids = self.nearest_codes(features.detach())
        quantized = self.lookup(ids).to(features.dtype)
        straight_through = features + (quantized - features).detach()
        return self.head(straight_through), straight_through, features, ids

    @torch.no_grad()
    def ema_update(self, features: torch.Tensor, ids: torch.Tensor) -> None:
        flat = rearrange(features, 'b c h w -> (b h w) c').to(self.ema_sum.dtype)
        one_hot = F.one_hot(ids.reshape(-1), self.cfg.codebook_size).to(flat.dtype)
        decay = self.cfg.ema_decay
        self.ema_count.mul_(decay).add_(one_hot.sum(0), alpha=1 - decay)
        self.ema_sum.mul_(decay).add_(one_hot.t() @ flat, alpha=1 - decay)
        n = self.ema_count.sum()
        smoothed = (self.ema_count + 1e-5) / (n + self.cfg.codebook_size * 1e-5) * n
        self.codebook.copy_(self.ema_sum / smoothed.unsqueeze(1))


def train_vq_step(
    tokenizer: VisionTokenizer,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor
) -> float:
    """
    One reconstruction + commitment step

    The reconstruction target is the image area-pooled to the token grid.
    In frozen mode the loss is computed and nothing is updated.

    Args:
        tokenizer: Model to train
        optimizer: Optimizer over the tokenizer's parameters
        images: (B, 3, 384, 384)

    Returns:
        Loss value before the update
    """
    if images.dim() != 4 or images.shape[0] == 0:
        raise ShapeError("train_vq_step needs a non-empty (B, 3, H, W) batch")
    target = F.adaptive_avg_pool2d(images, tokenizer.cfg.grid)

    if tokenizer.frozen:
        with torch.no_grad():
            recon, _, features, ids = tokenizer(images)
            quantized = tokenizer.lookup(ids).to(features.dtype)
            loss = F.mse_loss(recon, target) + tokenizer.cfg.commitment * F.mse_loss(features, quantized)
        return float(loss)

    tokenizer.train()
    recon, _, features, ids = tokenizer(images)
    quantized = tokenizer.lookup(ids).to(features.dtype).detach()
    loss = F.mse_loss(recon, target) + tokenizer.cfg.commitment * F.mse_loss(features, quantized)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    tokenizer.ema_update(features.detach(), ids)
    return float(loss.detach())
