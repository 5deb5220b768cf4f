"""
Coordinate mapping between pixels, the vision-token grid and decoder latents

The decoder curriculum crops images, and each crop must reference an
unambiguous sub-grid of the 27x27 token grid. Crops are therefore chosen in
token units first and mapped to pixels with an integer pixels-per-token stride.
"""
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional, Tuple

import numpy as np

from config import ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, half-open: [x0, x1) x [y0, y1)"""
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def to_tuple(self) -> Tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def to_dict(self) -> Dict[str, int]:
        return {'x0': self.x0, 'y0': self.y0, 'x1': self.x1, 'y1': self.y1}

    def scale(self, scale_x: int, scale_y: int) -> 'BBox':
        return BBox(
            x0=self.x0 * scale_x,
            y0=self.y0 * scale_y,
            x1=self.x1 * scale_x,
            y1=self.y1 * scale_y
        )

    def translate(self, offset_x: int, offset_y: int) -> 'BBox':
        return BBox(
            x0=self.x0 + offset_x,
            y0=self.y0 + offset_y,
            x1=self.x1 + offset_x,
            y1=self.y1 + offset_y
        )


@dataclass(frozen=True)
class CropWindow:
    """A crop in token units together with its pixel footprint"""
    tokens: BBox
    pixels: BBox
    stride: int

    def to_dict(self) -> Dict[str, object]:
        return {'tokens': self.tokens.to_dict(), 'pixels': self.pixels.to_dict(), 'stride': self.stride}


def token_aligned_crop(
    rng: np.random.Generator,
    grid: int,
    crop_tokens: int,
    stride: int
) -> CropWindow:
    """
    Draw a square crop whose offsets are multiples of the pixel stride

    Args:
        rng: Seeded generator
        grid: Token grid side (27)
        crop_tokens: Crop side in tokens
        stride: Pixels per token on the canvas

    Returns:
        CropWindow with token and pixel boxes
    """
    if not 1 <= crop_tokens <= grid:
        raise ShapeError(f"crop of {crop_tokens} tokens does not fit a {grid}-token grid")
    r0 = int(rng.integers(0, grid - crop_tokens + 1))
    c0 = int(rng.integers(0, grid - crop_tokens + 1))
    tokens = BBox(x0=c0, y0=r0, x1=c0 + crop_tokens, y1=r0 + crop_tokens)
    return CropWindow(tokens=tokens, pixels=tokens.scale(stride, stride), stride=stride)


def latent_size(width: int, height: int, factor: int = 8) -> Tuple[int, int]:
    """
    Latent (width, height) for a pixel image, rounding up to whole latent cells

    A 928x624 image gives (116, 78).
    """
    if width < 1 or height < 1:
        raise ShapeError(f"degenerate image {width}x{height}")
    return (math.ceil(width / factor), math.ceil(height / factor))


def aspect_of(width: int, height: int) -> Fraction:
    if width < 1 or height < 1:
        raise ShapeError(f"degenerate image {width}x{height}")
    return Fraction(width, height)


def restore_size(original_wh: Tuple[int, int], max_side: Optional[int] = None) -> Tuple[int, int]:
    """
    Output (width, height) that reproduces the recorded aspect ratio exactly

    Without ``max_side`` the original size is returned. With it, the size is
    the largest integer multiple of the reduced ratio fitting in max_side, so
    width:height stays exact.
    """
    width, height = original_wh
    ratio = aspect_of(width, height)
    if max_side is None or max(width, height) <= max_side:
        return (width, height)
    unit_w, unit_h = ratio.numerator, ratio.denominator
    multiple = max(1, max_side // max(unit_w, unit_h))
    if max(unit_w, unit_h) > max_side:
        logger.warning(f"aspect {unit_w}:{unit_h} cannot be reduced below {max_side}px; keeping original size")
        return (width, height)
    return (unit_w * multiple, unit_h * multiple)
