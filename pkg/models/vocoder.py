"""
Unit vocoder

25 Hz discrete audio codes -> code embedding, speaker embedding concatenated
along channels -> transposed-convolution upsampling stages with snake
activations and dilated residual blocks -> 16 kHz waveform. Each code spans
exactly 640 samples (40 ms).
"""
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from config import ConfigError, ShapeError, VocoderConfig
from models.base import ModalityDecoder
from models.encoders import LOG_FLOOR, mel_transform

logger = logging.getLogger(__name__)

STFT_RESOLUTIONS: Tuple[Tuple[int, int], ...] = ((512, 128), (256, 64), (128, 32))


def snake(x: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return x + torch.sin(alpha * x) ** 2 / alpha


class Snake(nn.Module):
    """x + sin^2(alpha x) / alpha with a learnable alpha per channel"""

    def __init__(self, channels: int):
        super().__init__()
        self.alpha = nn.Parameter(torch.ones((1, channels, 1)))

    def forward(self, x):
        return snake(x, self.alpha)


# activations that can stand in for the plain snake, keyed by config name
ACTIVATIONS = {
    'snake': Snake,
}


def build_activation(name: str, channels: int) -> nn.Module:
    try:
        return ACTIVATIONS[name](channels)
    except KeyError:
        raise ConfigError(f"unknown vocoder activation {name!r}") from None


class ResBlock(nn.Module):

    def __init__(self, channels: int, dilations: Sequence[int], activation: str, kernel_size: int = 3):
        super().__init__()
        self.convs1 = nn.ModuleList([
            nn.Conv1d(channels, channels, kernel_size, dilation=d, padding=d * (kernel_size - 1) // 2)
            for d in dilations
        ])
        self.convs2 = nn.ModuleList([
            nn.Conv1d(channels, channels, kernel_size, padding=(kernel_size - 1) // 2)
            for _ in dilations
        ])
        self.acts1 = nn.ModuleList([build_activation(activation, channels) for _ in dilations])
        self.acts2 = nn.ModuleList([build_activation(activation, channels) for _ in dilations])

    def forward(self, x):
        for c1, c2, a1, a2 in zip(self.convs1, self.convs2, self.acts1, self.acts2):
            x = x + c2(a2(c1(a1(x))))
        return x


def upsample_padding(factor: int) -> Tuple[int, int]:
    """(padding, output_padding) so a kernel-2f transposed conv maps L -> L * f"""
    return factor // 2 + factor % 2, factor % 2


class UnitGenerator(nn.Module):
    """Codes (B, L) + speaker (B, S) -> waveform (B, L * hop)"""

    def __init__(self, cfg: VocoderConfig, codebook_size: int):
        super().__init__()
        if math.prod(cfg.upsample_factors) * cfg.token_rate != cfg.sample_rate:
            raise ConfigError(
                f"upsample factors {cfg.upsample_factors} give {math.prod(cfg.upsample_factors)} samples per "
                f"code; {cfg.sample_rate} Hz at {cfg.token_rate} codes/s needs {cfg.sample_rate // cfg.token_rate}"
            )
        self.cfg = cfg
        self.codebook_size = codebook_size
        self.code_embedding = nn.Embedding(codebook_size, cfg.code_embed_dim)
        channels = cfg.initial_channels
        self.conv_pre = nn.Conv1d(cfg.code_embed_dim + cfg.speaker_dim, channels, 7, padding=3)

        self.acts = nn.ModuleList()
        self.ups = nn.ModuleList()
        self.resblocks = nn.ModuleList()
        for factor in cfg.upsample_factors:
            out_channels = max(channels // 2, 8)
            padding, output_padding = upsample_padding(factor)
            self.acts.append(build_activation(cfg.activation, channels))
            self.ups.append(nn.ConvTranspose1d(
                channels, out_channels, kernel_size=2 * factor, stride=factor,
                padding=padding, output_padding=output_padding
            ))
            self.resblocks.append(ResBlock(out_channels, cfg.resblock_dilations, cfg.activation))
            channels = out_channels
        self.act_post = build_activation(cfg.activation, channels)
        self.conv_post = nn.Conv1d(channels, 1, 7, padding=3)

    def snake_parameters(self) -> List[Tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if n.endswith('alpha')]

    def forward(self, codes: torch.Tensor, speaker: torch.Tensor) -> torch.Tensor:
        if codes.dim() != 2 or codes.shape[1] == 0:
            raise ShapeError(f"codes must be a non-empty (B, L) tensor, got {tuple(codes.shape)}")
        if int(codes.min()) < 0 or int(codes.max()) >= self.codebook_size:
            raise ShapeError(f"audio code outside [0, {self.codebook_size})")
        x = self.code_embedding(codes).transpose(1, 2)
        spk = speaker.to(x.dtype).unsqueeze(-1).expand(-1, -1, x.shape[-1])
        x = self.conv_pre(torch.cat([x, spk], dim=1))
        for act, up, res in zip(self.acts, self.ups, self.resblocks):
            x = res(up(act(x)))
        return torch.tanh(self.conv_post(self.act_post(x))).squeeze(1)


# ---------------------------------------------------------------------------
# Speaker embedding (mel statistics stand-in)
# ---------------------------------------------------------------------------

class SpeakerEncoder(nn.Module):
    """Mean and std of log-mel frames, centred, mapped linearly and L2-normalized"""

    def __init__(self, cfg: VocoderConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(2 * cfg.speaker_mels, cfg.speaker_dim, bias=False)

    def statistics(self, waveform: torch.Tensor) -> torch.Tensor:
        n_fft = int(self.cfg.sample_rate * 0.025)
        hop = int(self.cfg.sample_rate * 0.010)
        transform = mel_transform(self.cfg.sample_rate, n_fft, hop, self.cfg.speaker_mels).to(waveform.dtype)
        mel = torch.log10(transform(waveform).clamp_min(LOG_FLOOR))
        stats = torch.cat([mel.mean(dim=-1), mel.std(dim=-1)], dim=-1)
        return stats - stats.mean()

    def forward(self, waveform: torch.Tensor) -> torch.Tensor:
        minimum = int(self.cfg.min_reference_seconds * self.cfg.sample_rate)
        if waveform.dim() != 1 or waveform.numel() < minimum:
            raise ShapeError(f"speaker reference needs >= {self.cfg.min_reference_seconds}s of mono audio")
        embedding = self.proj(self.statistics(waveform).to(self.proj.weight.dtype))
        return F.normalize(embedding, dim=-1)


def cosine(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(F.cosine_similarity(a.unsqueeze(0), b.unsqueeze(0)))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _log_magnitude(x: torch.Tensor, n_fft: int, hop: int) -> torch.Tensor:
    window = torch.hann_window(n_fft, dtype=x.dtype, device=x.device)
    spec = torch.stft(x, n_fft=n_fft, hop_length=hop, window=window, return_complex=True)
    return torch.log(spec.abs().clamp_min(1e-5))


def multi_resolution_stft_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    losses = [F.l1_loss(_log_magnitude(pred, n, h), _log_magnitude(target, n, h)) for n, h in STFT_RESOLUTIONS]
    return sum(losses) / len(losses)


def align_target(target: torch.Tensor, length: int, hop: int) -> torch.Tensor:
    """Crop or zero-pad the target to the generated length; more than one code apart is an error"""
    diff = target.shape[-1] - length
    if abs(diff) > hop:
        raise ShapeError(f"target differs from {length} generated samples by {abs(diff)} (> {hop})")
    if diff > 0:
        return target[..., :length]
    if diff < 0:
        return F.pad(target, (0, -diff))
    return target


def vocoder_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return multi_resolution_stft_loss(pred, target) + F.l1_loss(pred, target)


def train_step(
    generator: UnitGenerator,
    optimizer: torch.optim.Optimizer,
    codes: torch.Tensor,
    target: torch.Tensor,
    speaker: torch.Tensor
) -> float:
    """
    One reconstruction step

    Args:
        codes: (B, L)
        target: (B, samples) waveform the codes came from
        speaker: (B, speaker_dim)
    """
    generator.train()
    pred = generator(codes, speaker)
    target = align_target(target.to(pred.dtype), pred.shape[-1], generator.cfg.hop_length)
    loss = vocoder_loss(pred, target)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_vocoder(
    generator: UnitGenerator,
    clips: Sequence[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
    steps: int,
    lr: float,
    seed: int = 0
) -> List[float]:
    """
    Overfit the generator on (codes, waveform, speaker) clips

    Clips are cropped to the shortest code length so they batch together.
    """
    if not clips:
        raise ShapeError("vocoder training needs at least one clip")
    torch.manual_seed(seed)
    hop = generator.cfg.hop_length
    length = min(c.shape[-1] for c, _, _ in clips)
    codes = torch.stack([c[:length] for c, _, _ in clips])
    waves = torch.stack([align_target(w, length * hop, hop) for _, w, _ in clips])
    speakers = torch.stack([s for _, _, s in clips])

    optimizer = torch.optim.AdamW(generator.parameters(), lr=lr, betas=(0.8, 0.99), weight_decay=0.0)
    losses = []
    for _ in tqdm(range(steps), desc='vocoder', disable=None):
        losses.append(train_step(generator, optimizer, codes, waves, speakers))
    logger.info(f"✓ vocoder: {steps} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return losses


class UnitVocoder(ModalityDecoder):
    """Completed audio span -> waveform of exactly len * 640 samples"""

    modality = 'audio'

    def __init__(self, generator: UnitGenerator, speaker_encoder: SpeakerEncoder,
                 default_speaker: Optional[torch.Tensor] = None):
        self.generator = generator
        self.speaker_encoder = speaker_encoder
        dim = generator.cfg.speaker_dim
        if default_speaker is None:
            default_speaker = torch.full((dim,), 1.0 / math.sqrt(dim))
        self.default_speaker = default_speaker

    def speaker_embed(self, reference: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.speaker_encoder(reference)

    @torch.no_grad()
    def synthesize(self, codes: Sequence[int], speaker: Optional[torch.Tensor] = None) -> torch.Tensor:
        if len(codes) == 0:
            raise ShapeError("cannot synthesize an empty code sequence")
        self.generator.eval()
        spk = self.default_speaker if speaker is None else speaker
        dtype = self.generator.conv_pre.weight.dtype
        tensor = torch.as_tensor(list(codes), dtype=torch.long).unsqueeze(0)
        return self.generator(tensor, spk.to(dtype).unsqueeze(0))[0]

    def decode_span(self, local_ids, seed: int = 0, context=None) -> torch.Tensor:
        speaker = context.get('speaker') if isinstance(context, dict) else context
        return self.synthesize(local_ids, speaker)


def synthesize(codes: Sequence[int], speaker: torch.Tensor, generator: UnitGenerator) -> torch.Tensor:
    return UnitVocoder(generator, SpeakerEncoder(generator.cfg)).synthesize(codes, speaker)


def speaker_statistics_summary(embeddings: Dict[str, List[torch.Tensor]]) -> float:
    """
    Fraction of (same-speaker pair, cross-speaker pair) comparisons where the
    same-speaker cosine is higher
    """
    wins = total = 0
    speakers = list(embeddings)
    for s in speakers:
        items = embeddings[s]
        others = [e for o in speakers if o != s for e in embeddings[o]]
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                intra = cosine(items[i], items[j])
                for other in others:
                    total += 1
                    wins += intra > cosine(items[i], other)
    return wins / total if total else 0.0
