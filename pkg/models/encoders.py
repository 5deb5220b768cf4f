"""
Continuous understanding path

Audio: 16 kHz waveform -> 128-channel log-mel at 100 Hz -> toy encoder at
25 Hz -> Linear-GELU-Linear adapter -> optional 25 -> 1 Hz compressor.
Vision: patch embedding under a per-item token budget -> linear adapter.
The audio tokenizer shares the frozen audio encoder and quantizes its 25 Hz
features with FSQ.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
import torchaudio
from einops import rearrange

from config import EncoderConfig, FsqConfig, ShapeError
from models.fsq import FiniteScalarQuantizer, quantize_ste
from utils.media_utils import resize_pixels

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-10


@dataclass
class MelFrames:
    """frames x n_mels log-magnitude mel values"""
    values: torch.Tensor
    frame_rate: float = 100.0
    source_rate: int = 16000

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[0])


@dataclass
class ContinuousEmbedding:
    """length x width features injected into the backbone sequence"""
    values: torch.Tensor
    rate: float
    modality: str

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[-1])


@dataclass(frozen=True)
class TokenBudget:
    image_budget: int = 3072
    video_budget: int = 11264

    @classmethod
    def from_config(cls, cfg: EncoderConfig) -> 'TokenBudget':
        return cls(image_budget=cfg.image_budget, video_budget=cfg.video_budget)


# ---------------------------------------------------------------------------
# Log-mel frontend
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def mel_transform(sample_rate: int, n_fft: int, hop: int, n_mels: int) -> torchaudio.transforms.MelSpectrogram:
    return torchaudio.transforms.MelSpectrogram(
        sample_rate=sample_rate,
        n_fft=n_fft,
        win_length=n_fft,
        hop_length=hop,
        n_mels=n_mels,
        center=True,
        pad_mode='constant',
        power=2.0,
    )


def frame_geometry(cfg: EncoderConfig):
    """(window samples, hop samples) at the encoder sample rate"""
    window = int(round(cfg.sample_rate * cfg.window_ms / 1000))
    hop = int(round(cfg.sample_rate * cfg.hop_ms / 1000))
    return window, hop


def log_mel(waveform: torch.Tensor, cfg: EncoderConfig) -> MelFrames:
    """
    128-channel log-mel frames at 100 Hz

    Args:
        waveform: Mono samples (N,) at cfg.sample_rate

    Returns:
        MelFrames with floor(N / hop) frames
    """
    if waveform.dim() != 1:
        raise ShapeError(f"log_mel expects a mono 1-D waveform, got {tuple(waveform.shape)}")
    if waveform.numel() == 0:
        raise ShapeError("empty waveform")
    window, hop = frame_geometry(cfg)
    num_frames = waveform.numel() // hop
    if num_frames == 0:
        raise ShapeError(f"waveform of {waveform.numel()} samples is shorter than one {hop}-sample hop")

    transform = mel_transform(cfg.sample_rate, window, hop, cfg.n_mels).to(waveform.dtype)
    power = transform(waveform)[:, :num_frames]
    values = torch.log10(power.clamp_min(LOG_FLOOR)).transpose(0, 1).contiguous()
    return MelFrames(values=values, frame_rate=cfg.sample_rate / hop, source_rate=cfg.sample_rate)


# ---------------------------------------------------------------------------
# Audio encoder / adapter / compressor
# ---------------------------------------------------------------------------

class AudioEncoder(nn.Module):
    """
    Toy stand-in for a pretrained speech encoder

    conv (stride 1) -> conv (stride 2) -> self-attention blocks -> avg-pool
    (stride 2): 100 Hz mel frames in, 25 Hz features out.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.audio_width
        self.conv1 = nn.Conv1d(cfg.n_mels, w, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(w, w, kernel_size=3, stride=2, padding=1)
        self.blocks = nn.ModuleList([
            nn.TransformerEncoderLayer(
                d_model=w, nhead=cfg.audio_heads, dim_feedforward=4 * w,
                dropout=0.0, activation='gelu', batch_first=True, norm_first=True
            )
            for _ in range(cfg.audio_layers)
        ])
        self.pool = nn.AvgPool1d(kernel_size=2, stride=2)
        self.norm = nn.LayerNorm(w)

    @staticmethod
    def output_length(num_frames: int) -> int:
        return num_frames // 4

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, T, n_mels) -> (B, T // 4, width)"""
        if mel.shape[1] < 4:
            raise ShapeError(f"audio encoder needs at least 4 mel frames, got {mel.shape[1]}")
        n = mel.shape[1]
        x = F.gelu(self.conv1(rearrange(mel, 'b t c -> b c t')))
        x = F.gelu(self.conv2(x))[:, :, : n // 2]
        x = rearrange(x, 'b c t -> b t c')
        for block in self.blocks:
            x = block(x)
        x = self.pool(rearrange(x, 'b t c -> b c t'))
        return self.norm(rearrange(x, 'b c t -> b t c'))

    def encode(self, mel: MelFrames) -> ContinuousEmbedding:
        values = self(mel.values.unsqueeze(0).to(self.conv1.weight.dtype))[0]
        return ContinuousEmbedding(values=values, rate=mel.frame_rate / 4, modality='audio')


def encode_audio(encoder: AudioEncoder, mel: MelFrames) -> ContinuousEmbedding:
    return encoder.encode(mel)


class AudioAdapter(nn.Module):
    """Linear -> GELU -> Linear into the backbone width"""

    def __init__(self, in_width: int, out_width: int, hidden_mult: int = 4):
        super().__init__()
        self.in_width = in_width
        self.fc1 = nn.Linear(in_width, hidden_mult * out_width)
        self.fc2 = nn.Linear(hidden_mult * out_width, out_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_width:
            raise ShapeError(f"adapter expects width {self.in_width}, got {x.shape[-1]}")
        return self.fc2(F.gelu(self.fc1(x)))

    def adapt(self, embedding: ContinuousEmbedding) -> ContinuousEmbedding:
        return ContinuousEmbedding(values=self(embedding.values), rate=embedding.rate,
                                   modality=embedding.modality)


class TemporalCompressor(nn.Module):
    """
    Gated windowed aggregator, 25 frames -> 1

    Each non-overlapping window is reduced to a softmax-weighted mean of gated
    frames. A trailing partial window is weighted over the frames it has.
    """

    def __init__(self, width: int, window: int = 25):
        super().__init__()
        self.window = window
        self.score = nn.Linear(width, 1)
        self.gate = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)

    @staticmethod
    def output_length(length: int, window: int = 25) -> int:
        return math.ceil(length / window)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(T, W) -> (ceil(T / window), W)"""
        if x.shape[0] == 0:
            raise ShapeError("cannot compress an empty embedding sequence")
        length, width = x.shape
        windows = self.output_length(length, self.window)
        pad = windows * self.window - length
        valid = torch.ones(length, dtype=torch.bool, device=x.device)
        if pad:
            x = torch.cat([x, x.new_zeros(pad, width)], dim=0)
            valid = torch.cat([valid, valid.new_zeros(pad)])
        x = rearrange(x, '(n w) c -> n w c', w=self.window)
        valid = rearrange(valid, '(n w) -> n w', w=self.window)

        scores = self.score(x).squeeze(-1).masked_fill(~valid, float('-inf'))
        weights = torch.softmax(scores, dim=-1).unsqueeze(-1)
        gated = torch.sigmoid(self.gate(x)) * self.value(x)
        return self.out((weights * gated).sum(dim=1))

    def compress(self, embedding: ContinuousEmbedding) -> ContinuousEmbedding:
        return ContinuousEmbedding(values=self(embedding.values), rate=embedding.rate / self.window,
                                   modality=embedding.modality)


# ---------------------------------------------------------------------------
# Vision encoder
# ---------------------------------------------------------------------------

def _pooled_grid(rows: int, cols: int, limit: int):
    """Largest grid with the same aspect (rounded down) holding at most `limit` cells"""
    if rows * cols <= limit:
        return rows, cols
    scale = math.sqrt(limit / (rows * cols))
    r, c = max(1, int(rows * scale)), max(1, int(cols * scale))
    while r * c > limit:
        if r >= c and r > 1:
            r -= 1
        elif c > 1:
            c -= 1
        else:
            break
    return r, c


class VisionEncoder(nn.Module):
    """Patch embedding + linear adapter under a token budget"""

    def __init__(self, cfg: EncoderConfig, hidden: int):
        super().__init__()
        self.cfg = cfg
        p = cfg.vision_patch
        self.patch = nn.Conv2d(3, cfg.vision_width, kernel_size=p, stride=p)
        self.norm = nn.LayerNorm(cfg.vision_width)
        self.adapter = nn.Linear(cfg.vision_width, hidden)

    def patch_features(self, frame: torch.Tensor) -> torch.Tensor:
        """(3, H, W) -> (rows, cols, width), resizing to whole patches first"""
        p = self.cfg.vision_patch
        _, h, w = frame.shape
        rows, cols = max(1, round(h / p)), max(1, round(w / p))
        if (h, w) != (rows * p, cols * p):
            frame = resize_pixels(frame, (rows * p, cols * p))
        features = self.patch(frame.unsqueeze(0).to(self.patch.weight.dtype))[0]
        return rearrange(features, 'c h w -> h w c')

    def forward(self, frames: Union[torch.Tensor, Sequence[torch.Tensor]], budget: int) -> torch.Tensor:
        if budget < 1:
            raise ShapeError(f"token budget must be >= 1, got {budget}")
        if isinstance(frames, torch.Tensor) and frames.dim() == 3:
            frames = [frames]
        frames = list(frames)
        if not frames:
            raise ShapeError("no frames to encode")
        if len(frames) > self.cfg.max_video_frames:
            raise ShapeError(f"{len(frames)} frames exceed the {self.cfg.max_video_frames}-frame reference")
        per_frame = budget // len(frames)
        if per_frame < 1:
            raise ShapeError(f"budget {budget} cannot cover {len(frames)} frames")

        pieces: List[torch.Tensor] = []
        for frame in frames:
            grid = self.patch_features(frame)
            rows, cols = _pooled_grid(grid.shape[0], grid.shape[1], per_frame)
            if (rows, cols) != tuple(grid.shape[:2]):
                pooled = F.adaptive_avg_pool2d(rearrange(grid, 'h w c -> 1 c h w'), (rows, cols))
                grid = rearrange(pooled, '1 c h w -> h w c')
            pieces.append(rearrange(grid, 'h w c -> (h w) c'))
        return self.adapter(self.norm(torch.cat(pieces, dim=0)))


def encode_image(
    encoder: VisionEncoder,
    frames: Union[torch.Tensor, Sequence[torch.Tensor]],
    budget: TokenBudget,
    video: bool = False
) -> ContinuousEmbedding:
    """
    Continuous vision embeddings for one image or one clip of frames

    Args:
        encoder: Vision encoder
        frames: A (3, H, W) image or a sequence of frames
        budget: Token budget; the video budget applies when ``video`` is set
        video: Use the video budget

    Returns:
        ContinuousEmbedding with at most the budgeted number of rows
    """
    limit = budget.video_budget if video else budget.image_budget
    values = encoder(frames, limit)
    logger.debug(f"encode_image: {values.shape[0]} embeddings (budget {limit})")
    return ContinuousEmbedding(values=values, rate=0.0, modality='vision')


# ---------------------------------------------------------------------------
# Audio tokenizer (discrete path)
# ---------------------------------------------------------------------------

class AudioTokenizer(nn.Module):
    """Frozen audio encoder features quantized by FSQ: 25 codes per second"""

    def __init__(self, encoder: AudioEncoder, fsq_cfg: FsqConfig):
        super().__init__()
        self.encoder = encoder
        self.fsq = FiniteScalarQuantizer(fsq_cfg)

    @torch.no_grad()
    def tokenize(self, waveform: torch.Tensor) -> torch.Tensor:
        mel = log_mel(waveform, self.encoder.cfg)
        features = self.encoder.encode(mel).values
        return self.fsq.encode(features)

    def reconstruction_loss(self, waveform: torch.Tensor) -> torch.Tensor:
        """Autoencoding loss of the FSQ projections on frozen encoder features"""
        with torch.no_grad():
            features = self.encoder.encode(log_mel(waveform, self.encoder.cfg)).values
        z = self.fsq.project_in(features)
        recon = self.fsq.project_out(quantize_ste(z, self.fsq.cfg))
        return F.mse_loss(recon, features)


# ---------------------------------------------------------------------------
# Slot counts (sequence layout without running the encoders)
# ---------------------------------------------------------------------------

def audio_embedding_count(num_samples: int, cfg: EncoderConfig, compressed: bool = False) -> int:
    """floor(100 t / 4) embeddings at 25 Hz, ceil of that over 25 when compressed"""
    _, hop = frame_geometry(cfg)
    count = AudioEncoder.output_length(num_samples // hop)
    if count < 1:
        raise ShapeError(f"{num_samples} samples give no 25 Hz embeddings")
    return TemporalCompressor.output_length(count, cfg.compress_window) if compressed else count


def vision_embedding_count(frame_sizes: Sequence, cfg: EncoderConfig, budget: int) -> int:
    """Embeddings VisionEncoder emits for frames of the given (H, W) sizes"""
    frame_sizes = list(frame_sizes)
    if budget < 1 or not frame_sizes or budget // len(frame_sizes) < 1:
        raise ShapeError(f"budget {budget} cannot cover {len(frame_sizes)} frames")
    per_frame = budget // len(frame_sizes)
    total = 0
    for h, w in frame_sizes:
        rows = max(1, round(h / cfg.vision_patch))
        cols = max(1, round(w / cfg.vision_patch))
        r, c = _pooled_grid(rows, cols, per_frame)
        total += r * c
    return total
