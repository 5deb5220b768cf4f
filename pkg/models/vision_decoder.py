"""
Vision-token decoder

Tokens -> 27x27 feature grid -> bilinear resize to the latent shape of the
requested image -> concatenated channel-wise with the noisy latent -> small
DiT trained with a rectified-flow objective. There is no text pathway.
Sampling integrates the flow with Euler steps and autoguidance from a smaller
"bad" model. The latent codec is plain 8x area pooling.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from tqdm import tqdm

from config import ShapeError, VisionDecoderConfig
from models.base import ModalityDecoder
from models.vision_tokenizer import ImageBuffer, VisionTokenGrid, VisionTokenizer, resize_square
from utils.coordinate_utils import CropWindow, latent_size, token_aligned_crop
from utils.media_utils import resize_pixels

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Latent codec (8x area pooling)
# ---------------------------------------------------------------------------

def encode_latent(pixels: torch.Tensor, factor: int = 8) -> torch.Tensor:
    """(..., 3, H, W) -> (..., 3, ceil(H/f), ceil(W/f)) by area averaging"""
    squeeze = pixels.dim() == 3
    x = pixels.unsqueeze(0) if squeeze else pixels
    h, w = x.shape[-2:]
    pad_h, pad_w = (-h) % factor, (-w) % factor
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode='replicate')
    latent = F.avg_pool2d(x, factor)
    return latent[0] if squeeze else latent


def decode_latent(latent: torch.Tensor, size_hw: Tuple[int, int]) -> torch.Tensor:
    """Bilinear upsampling of a latent to an exact pixel size"""
    squeeze = latent.dim() == 3
    x = latent.unsqueeze(0) if squeeze else latent
    pixels = F.interpolate(x, size=size_hw, mode='bilinear', align_corners=False).clamp(0.0, 1.0)
    return pixels[0] if squeeze else pixels


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    mse = float(F.mse_loss(a.to(torch.float64), b.to(torch.float64)))
    if mse == 0:
        return float('inf')
    return 10.0 * math.log10(peak ** 2 / mse)


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------

@dataclass
class CondGrid:
    """C_cond x H x W conditioning aligned with a latent"""
    values: torch.Tensor

    @property
    def spatial(self) -> Tuple[int, int]:
        return tuple(self.values.shape[-2:])


def features_to_cond(features: torch.Tensor, target_hw: Tuple[int, int]) -> CondGrid:
    """(C, g, g) feature field -> (C, H, W) bilinear resample"""
    h, w = target_hw
    if h < 1 or w < 1:
        raise ShapeError(f"conditioning target must be at least 1x1, got {target_hw}")
    if tuple(features.shape[-2:]) == (h, w):
        return CondGrid(values=features)
    values = F.interpolate(features.unsqueeze(0), size=(h, w), mode='bilinear', align_corners=False)[0]
    return CondGrid(values=values)


def tokens_to_cond(tokenizer: VisionTokenizer, grid: VisionTokenGrid, target_hw: Tuple[int, int]) -> CondGrid:
    """
    Detokenize to the feature grid and resize it to the latent shape

    Args:
        tokenizer: Provides the codebook
        grid: 27x27 token grid
        target_hw: Latent (height, width); a 928x624 image gives (78, 116)
    """
    features = tokenizer.detokenize(grid).channels_first()
    return features_to_cond(features, target_hw)


# ---------------------------------------------------------------------------
# DiT
# ---------------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = (1000.0 * t)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def sincos_2d(rows: int, cols: int, dim: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """(rows * cols, dim) fixed 2-D positions; dim must be divisible by 4"""
    quarter = dim // 4
    omega = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64, device=device) / quarter))
    ys, xs = torch.meshgrid(
        torch.arange(rows, dtype=torch.float64, device=device),
        torch.arange(cols, dtype=torch.float64, device=device),
        indexing='ij'
    )
    out_y = ys.reshape(-1, 1) * omega[None]
    out_x = xs.reshape(-1, 1) * omega[None]
    emb = torch.cat([out_y.sin(), out_y.cos(), out_x.sin(), out_x.cos()], dim=1)
    return emb.to(dtype)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(width, 2 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        q = rearrange(self.q(x), 'b n (h d) -> b h n d', h=self.heads)
        k, v = rearrange(self.kv(context), 'b n (two h d) -> two b h n d', two=2, h=self.heads)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.proj(rearrange(y, 'b h n d -> b n (h d)'))


class DiTBlock(nn.Module):
    """adaLN-Zero block; optional cross-attention for the baseline conditioner"""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4, cross_attention: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(width, heads)
        self.cross = Attention(width, heads) if cross_attention else None
        self.norm_cross = nn.LayerNorm(width, eps=1e-6) if cross_attention else None
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(approximate='tanh'),
            nn.Linear(mlp_ratio * width, width),
        )
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def forward(self, x, emb, context=None):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(emb).chunk(6, dim=-1)
        x = x + gate1.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift1, scale1))
        if self.cross is not None:
            x = x + self.cross(self.norm_cross(x), context)
        return x + gate2.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift2, scale2))


class _DiTBase(nn.Module):

    def __init__(self, latent_channels: int, width: int, blocks: int, heads: int, patch: int,
                 in_channels: int, mlp_ratio: int, cross_attention: bool):
        super().__init__()
        if width % 4:
            raise ShapeError(f"decoder width {width} must be divisible by 4")
        self.latent_channels = latent_channels
        self.width = width
        self.patch = patch
        self.patch_in = nn.Conv2d(in_channels, width, kernel_size=patch, stride=patch)
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.blocks = nn.ModuleList([
            DiTBlock(width, heads, mlp_ratio=mlp_ratio, cross_attention=cross_attention)
            for _ in range(blocks)
        ])
        self.norm_out = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        self.patch_out = nn.Linear(width, latent_channels * patch * patch)
        nn.init.zeros_(self.ada_out[1].weight)
        nn.init.zeros_(self.ada_out[1].bias)
        nn.init.zeros_(self.patch_out.weight)
        nn.init.zeros_(self.patch_out.bias)

    def _pad(self, x: torch.Tensor) -> torch.Tensor:
        p = self.patch
        h, w = x.shape[-2:]
        return F.pad(x, (0, (-w) % p, 0, (-h) % p), mode='replicate')

    def _tokens(self, x: torch.Tensor, conv: nn.Conv2d) -> Tuple[torch.Tensor, int, int]:
        x = conv(self._pad(x))
        rows, cols = x.shape[-2:]
        tokens = rearrange(x, 'b c h w -> b (h w) c')
        return tokens + sincos_2d(rows, cols, self.width, x.device, x.dtype)[None], rows, cols

    def _run(self, tokens, rows, cols, t, size_hw, context=None):
        emb = self.time_mlp(timestep_embedding(t.to(tokens.dtype), self.width))
        for block in self.blocks:
            tokens = block(tokens, emb, context)
        shift, scale = self.ada_out(emb).chunk(2, dim=-1)
        out = self.patch_out(modulate(self.norm_out(tokens), shift, scale))
        out = rearrange(out, 'b (h w) (c p q) -> b c (h p) (w q)', h=rows, w=cols,
                        p=self.patch, q=self.patch, c=self.latent_channels)
        return out[..., : size_hw[0], : size_hw[1]]


class ChannelConcatDiT(_DiTBase):
    """Conditioning enters only as extra input channels next to the noisy latent"""

    def __init__(self, latent_channels: int, cond_channels: int, width: int, blocks: int, heads: int, patch: int = 2):
        super().__init__(latent_channels, width, blocks, heads, patch,
                         in_channels=latent_channels + cond_channels, mlp_ratio=4, cross_attention=False)
        self.cond_channels = cond_channels

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x_t.shape[-2:] != cond.shape[-2:]:
            raise ShapeError(f"latent {tuple(x_t.shape[-2:])} and cond {tuple(cond.shape[-2:])} differ spatially")
        tokens, rows, cols = self._tokens(torch.cat([x_t, cond.to(x_t.dtype)], dim=1), self.patch_in)
        return self._run(tokens, rows, cols, t, x_t.shape[-2:])


class AttentionConditionedDiT(_DiTBase):
    """
    Baseline: cond grid patchified into a separate token stream read by
    cross-attention. The MLP ratio is halved so the parameter count matches
    ChannelConcatDiT at equal width and depth.
    """

    def __init__(self, latent_channels: int, cond_channels: int, width: int, blocks: int, heads: int, patch: int = 2):
        super().__init__(latent_channels, width, blocks, heads, patch,
                         in_channels=latent_channels, mlp_ratio=2, cross_attention=True)
        self.cond_in = nn.Conv2d(cond_channels, width, kernel_size=patch, stride=patch)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x_t.shape[-2:] != cond.shape[-2:]:
            raise ShapeError(f"latent {tuple(x_t.shape[-2:])} and cond {tuple(cond.shape[-2:])} differ spatially")
        tokens, rows, cols = self._tokens(x_t, self.patch_in)
        context, _, _ = self._tokens(cond.to(x_t.dtype), self.cond_in)
        return self._run(tokens, rows, cols, t, x_t.shape[-2:], context=context)


def build_decoder(cfg: VisionDecoderConfig, cond_channels: int, bad: bool = False,
                  attention_conditioned: bool = False) -> _DiTBase:
    width = cfg.bad_width if bad else cfg.width
    blocks = cfg.bad_blocks if bad else cfg.blocks
    cls = AttentionConditionedDiT if attention_conditioned else ChannelConcatDiT
    return cls(cfg.latent_channels, cond_channels, width, blocks, cfg.heads, cfg.patch)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Objective and sampling
# ---------------------------------------------------------------------------

def rectified_flow_loss(
    model: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
    x0: torch.Tensor,
    cond: torch.Tensor,
    t: torch.Tensor,
    noise: torch.Tensor
) -> torch.Tensor:
    """
    MSE between the predicted velocity and noise - x0

    x_t = (1 - t) * x0 + t * noise; the network sees concat(x_t, cond).
    """
    if x0.shape != noise.shape:
        raise ShapeError(f"latent {tuple(x0.shape)} and noise {tuple(noise.shape)} differ")
    if x0.shape[-2:] != cond.shape[-2:]:
        raise ShapeError(f"latent {tuple(x0.shape[-2:])} and cond {tuple(cond.shape[-2:])} differ spatially")
    tt = t.to(x0.dtype).view(-1, 1, 1, 1)
    x_t = (1 - tt) * x0 + tt * noise
    return F.mse_loss(model(x_t, t, cond), noise - x0)


@dataclass
class GuidanceConfig:
    scale: float = 1.75
    bad_model: Optional[nn.Module] = None


@torch.no_grad()
def sample_latent(
    model: nn.Module,
    cond: CondGrid,
    steps: int,
    guidance: GuidanceConfig,
    seed: int = 0,
    latent_channels: int = 3
) -> torch.Tensor:
    """
    Euler integration of the flow from t=1 (noise) to t=0

    Per step v = v_bad + s * (v_main - v_bad); at s = 1 the bad model is not
    evaluated at all.

    Returns:
        (C, H, W) latent
    """
    if steps < 1:
        raise ShapeError("sampling needs at least one step")
    use_guidance = guidance.scale != 1.0
    if use_guidance and guidance.bad_model is None:
        raise ShapeError(f"guidance scale {guidance.scale} needs a bad model")
    model.eval()
    if use_guidance:
        guidance.bad_model.eval()

    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device
    c = cond.values.unsqueeze(0).to(device=device, dtype=dtype)
    generator = torch.Generator().manual_seed(seed)
    x = torch.randn((1, latent_channels) + cond.spatial, generator=generator, dtype=dtype).to(device)

    dt = 1.0 / steps
    for i in range(steps):
        t = torch.full((1,), 1.0 - i * dt, dtype=dtype, device=device)
        v = model(x, t, c)
        if use_guidance:
            v_bad = guidance.bad_model(x, t, c)
            v = v_bad + guidance.scale * (v - v_bad)
        x = x - dt * v
    return x[0]


# ---------------------------------------------------------------------------
# Training curriculum
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseConfig:
    phase: int
    name: str
    canvas_stride: int  # pixels per token on the crop canvas
    crop_tokens: Optional[int]  # None -> full image
    pixel_size: int
    lr_scale: float
    step_fraction: float

    def to_dict(self) -> Dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


_PHASES = {
    1: PhaseConfig(1, 'low_res_crops', canvas_stride=4, crop_tokens=16, pixel_size=64, lr_scale=1.0, step_fraction=0.3),
    2: PhaseConfig(2, 'full_res_crops', canvas_stride=8, crop_tokens=12, pixel_size=96, lr_scale=1.0, step_fraction=0.3),
    3: PhaseConfig(3, 'full_images', canvas_stride=0, crop_tokens=None, pixel_size=96, lr_scale=1.0, step_fraction=0.3),
    4: PhaseConfig(4, 'refinement', canvas_stride=0, crop_tokens=None, pixel_size=96, lr_scale=0.1, step_fraction=0.1),
}


def phase_schedule(phase: int) -> PhaseConfig:
    """
    Phase 1 low-resolution crops, phase 2 full-resolution crops (1:2
    regions), phase 3 full images, phase 4 refinement at 0.1x learning rate
    """
    if phase not in _PHASES:
        raise ShapeError(f"decoder phase must be 1..4, got {phase}")
    return _PHASES[phase]


def phase_steps(total_steps: int) -> List[int]:
    """Split a step budget across the four phases, remainder to phase 3"""
    counts = [int(total_steps * phase_schedule(p).step_fraction) for p in range(1, 5)]
    counts[2] += total_steps - sum(counts)
    return counts


@dataclass
class DecoderExample:
    """One training image: pixels plus its token feature field (C, 27, 27)"""
    pixels: torch.Tensor
    features: torch.Tensor


def prepare_examples(tokenizer: VisionTokenizer, images: Sequence[torch.Tensor]) -> List[DecoderExample]:
    examples = []
    for pixels in images:
        square = resize_square(ImageBuffer(pixels=pixels), tokenizer.cfg.image_size)
        grid = tokenizer.tokenize(square)
        features = tokenizer.detokenize(grid).channels_first()
        examples.append(DecoderExample(pixels=square.pixels, features=features))
    return examples


def phase_batch(
    examples: Sequence[DecoderExample],
    phase: PhaseConfig,
    rng: np.random.Generator,
    grid: int = 27,
    factor: int = 8
) -> Tuple[torch.Tensor, torch.Tensor, List[Optional[CropWindow]]]:
    """
    Latents and conditioning for one phase

    Crops are drawn on a canvas of grid * stride pixels so every crop covers a
    whole token sub-grid; the matching features are sliced from the grid.

    Returns:
        (latents (B, 3, h, w), cond (B, C, h, w), crop windows)
    """
    latents, conds, windows = [], [], []
    for example in examples:
        if phase.crop_tokens is None:
            pixels = resize_pixels(example.pixels, (phase.pixel_size, phase.pixel_size))
            features = example.features
            window = None
        else:
            canvas = grid * phase.canvas_stride
            pixels = resize_pixels(example.pixels, (canvas, canvas))
            window = token_aligned_crop(rng, grid, phase.crop_tokens, phase.canvas_stride)
            px, tk = window.pixels, window.tokens
            pixels = pixels[:, px.y0:px.y1, px.x0:px.x1]
            features = example.features[:, tk.y0:tk.y1, tk.x0:tk.x1]
            if pixels.shape[-1] != phase.pixel_size:
                pixels = resize_pixels(pixels, (phase.pixel_size, phase.pixel_size))
        latent = encode_latent(pixels, factor)
        latents.append(latent)
        conds.append(features_to_cond(features, tuple(latent.shape[-2:])).values)
        windows.append(window)
    return torch.stack(latents), torch.stack(conds), windows


def train_decoder(
    model: nn.Module,
    examples: Sequence[DecoderExample],
    total_steps: int,
    lr: float,
    seed: int = 0,
    batch_size: int = 8,
    desc: str = 'decoder'
) -> List[float]:
    """
    Four-phase curriculum; the optimizer learning rate is rescaled per phase

    Returns:
        Per-step losses
    """
    if not examples:
        raise ShapeError("decoder training needs at least one example")
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    dtype = next(model.parameters()).dtype
    losses: List[float] = []
    model.train()

    counts = phase_steps(total_steps)
    with tqdm(total=total_steps, desc=desc, disable=None) as bar:
        for phase_id, count in zip(range(1, 5), counts):
            phase = phase_schedule(phase_id)
            for group in optimizer.param_groups:
                group['lr'] = lr * phase.lr_scale
            for _ in range(count):
                picks = rng.choice(len(examples), size=min(batch_size, len(examples)), replace=False)
                x0, cond, _ = phase_batch([examples[i] for i in picks], phase, rng)
                x0, cond = x0.to(dtype), cond.to(dtype)
                t = torch.rand(x0.shape[0], generator=generator, dtype=dtype)
                noise = torch.randn(x0.shape, generator=generator, dtype=dtype)
                loss = rectified_flow_loss(model, x0, cond, t, noise)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))
                bar.update(1)
            logger.info(f"✓ {desc} phase {phase_id} ({phase.name}): {count} steps, "
                        f"last loss {losses[-1] if losses else float('nan'):.4f}")
    return losses


@torch.no_grad()
def validation_loss(model: nn.Module, examples: Sequence[DecoderExample], seed: int = 1, draws: int = 4) -> float:
    """Rectified-flow loss on full-image phase batches with fixed noise"""
    model.eval()
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    x0, cond, _ = phase_batch(examples, phase_schedule(3), rng)
    x0, cond = x0.to(dtype), cond.to(dtype)
    total = 0.0
    for _ in range(draws):
        t = torch.rand(x0.shape[0], generator=generator, dtype=dtype)
        noise = torch.randn(x0.shape, generator=generator, dtype=dtype)
        total += float(rectified_flow_loss(model, x0, cond, t, noise))
    return total / draws


# ---------------------------------------------------------------------------
# Decoder facade
# ---------------------------------------------------------------------------

class VisionDecoder(ModalityDecoder):
    """Completed vision span -> pixels at the recorded original size"""

    modality = 'image'

    def __init__(self, tokenizer: VisionTokenizer, main: nn.Module, cfg: VisionDecoderConfig,
                 bad: Optional[nn.Module] = None):
        self.tokenizer = tokenizer
        self.main = main
        self.bad = bad
        self.cfg = cfg

    def guidance(self, scale: Optional[float] = None) -> GuidanceConfig:
        return GuidanceConfig(scale=self.cfg.guidance_scale if scale is None else scale, bad_model=self.bad)

    def decode_grid(
        self,
        grid: VisionTokenGrid,
        original_size: Optional[Tuple[int, int]] = None,
        seed: int = 0,
        steps: Optional[int] = None,
        guidance_scale: Optional[float] = None
    ) -> torch.Tensor:
        """
        Args:
            grid: 27x27 tokens
            original_size: (width, height) to restore; defaults to the square output size

        Returns:
            (3, height, width) pixels
        """
        width, height = original_size or grid.original_size or (self.cfg.output_size, self.cfg.output_size)
        lat_w, lat_h = latent_size(width, height, self.cfg.latent_factor)
        cond = tokens_to_cond(self.tokenizer, grid, (lat_h, lat_w))
        latent = sample_latent(
            self.main, cond, steps or self.cfg.sample_steps, self.guidance(guidance_scale),
            seed=seed, latent_channels=self.cfg.latent_channels
        )
        return decode_latent(latent.float(), (height, width))

    def decode_span(self, local_ids, seed: int = 0, context=None) -> torch.Tensor:
        grid = VisionTokenGrid.from_flat(local_ids, self.tokenizer.cfg.codebook_size, self.tokenizer.cfg.grid)
        original = None
        steps = scale = None
        if isinstance(context, dict):
            original = context.get('original_size')
            steps = context.get('steps')
            scale = context.get('guidance_scale')
        elif context is not None:
            original = tuple(context)
        return self.decode_grid(grid, original_size=original, seed=seed, steps=steps, guidance_scale=scale)
