"""
Decoder-only backbone over the unified vocabulary

Pre-norm transformer blocks with rotary positions and causal attention,
untied input embedding and output head, an optional multi-token-prediction
branch (one extra block + its own head, predicting position t+2), a
weighted cross-entropy objective and a modality-constrained sampler.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from config import BackboneConfig, LossError, MtpConfig, SamplerConfig, ShapeError, VocabError
from models.base import ModalityDecoder
from modality_vocab import Region, VocabLayout
import prompts

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100
VISION_SPAN_LENGTH = 729


# ---------------------------------------------------------------------------
# Transformer
# ---------------------------------------------------------------------------

def rotary_tables(length: int, head_dim: int, base: float, device=None, dtype=torch.float32):
    channel_range = torch.arange(0, head_dim, 2, dtype=torch.float64, device=device)
    inv_freq = 1.0 / (base ** (channel_range / head_dim))
    t = torch.arange(length, dtype=torch.float64, device=device)
    freqs = torch.outer(t, inv_freq)
    return freqs.cos().to(dtype)[None, None], freqs.sin().to(dtype)[None, None]


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat([x1 * cos + x2 * sin, x1 * (-sin) + x2 * cos], dim=-1)


class CausalSelfAttention(nn.Module):

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.heads = cfg.heads
        self.qkv = nn.Linear(cfg.hidden, 3 * cfg.hidden)
        self.proj = nn.Linear(cfg.hidden, cfg.hidden)

    def forward(self, x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
        q, k, v = rearrange(self.qkv(x), 'b l (three h d) -> three b h l d', three=3, h=self.heads)
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        return self.proj(rearrange(y, 'b h l d -> b l (h d)'))


class Block(nn.Module):

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln_1 = nn.LayerNorm(cfg.hidden)
        self.attn = CausalSelfAttention(cfg)
        self.ln_2 = nn.LayerNorm(cfg.hidden)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden, cfg.mlp_mult * cfg.hidden),
            nn.GELU(),
            nn.Linear(cfg.mlp_mult * cfg.hidden, cfg.hidden),
        )

    def forward(self, x, cos, sin):
        x = x + self.attn(self.ln_1(x), cos, sin)
        return x + self.mlp(self.ln_2(x))


@dataclass
class BackboneOutput:
    logits: torch.Tensor
    mtp_logits: Optional[torch.Tensor]
    hidden: torch.Tensor


@dataclass
class LossOutput:
    total: torch.Tensor
    main: torch.Tensor
    aux: torch.Tensor

    def to_dict(self) -> Dict[str, float]:
        return {'total': float(self.total), 'main': float(self.main), 'aux': float(self.aux)}


class OmniBackbone(nn.Module):
    """Autoregressive transformer; injection slots bypass the embedding lookup"""

    def __init__(self, cfg: BackboneConfig, vocab_size: int, mtp: Optional[MtpConfig] = None):
        super().__init__()
        if cfg.hidden % cfg.heads:
            raise ShapeError(f"hidden {cfg.hidden} not divisible by heads {cfg.heads}")
        if (cfg.hidden // cfg.heads) % 2:
            raise ShapeError("rotary positions need an even head dimension")
        self.cfg = cfg
        self.mtp_cfg = mtp or MtpConfig(enabled=False)
        self.vocab_size = vocab_size
        # the active stage may raise this past the config default
        self.context_limit = cfg.context_length

        self.embedding = nn.Embedding(vocab_size, cfg.hidden)
        self.layers = nn.ModuleList([Block(cfg) for _ in range(cfg.layers)])
        self.norm = nn.LayerNorm(cfg.hidden)
        self.output_head = nn.Linear(cfg.hidden, vocab_size, bias=False)
        if self.mtp_cfg.enabled:
            self.mtp_layers = nn.ModuleList([Block(cfg) for _ in range(self.mtp_cfg.extra_layers)])
            self.mtp_norm = nn.LayerNorm(cfg.hidden)
            self.mtp_output_head = nn.Linear(cfg.hidden, vocab_size, bias=False)
        else:
            self.mtp_layers = None
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    def parameter_groups(self, prefix: str = '') -> Dict[str, Dict[str, nn.Parameter]]:
        """Registry used by freeze masks: group -> {qualified name -> parameter}"""
        groups: Dict[str, Dict[str, nn.Parameter]] = {
            'embedding': {}, 'output_head': {}, 'decoder_layers': {},
        }
        if self.mtp_layers is not None:
            groups['mtp_layers'] = {}
            groups['mtp_output_head'] = {}
        for name, param in self.named_parameters():
            head = name.split('.', 1)[0]
            if head == 'embedding':
                group = 'embedding'
            elif head == 'output_head':
                group = 'output_head'
            elif head == 'mtp_output_head':
                group = 'mtp_output_head'
            elif head in ('mtp_layers', 'mtp_norm'):
                group = 'mtp_layers'
            else:
                group = 'decoder_layers'
            groups[group][prefix + name] = param
        return groups

    def embed(
        self,
        ids: torch.Tensor,
        inject_values: Optional[torch.Tensor] = None,
        inject_mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise VocabError(f"token id outside [0, {self.vocab_size})")
        x = self.embedding(ids)
        if inject_mask is not None and bool(inject_mask.any()):
            if inject_values is None or inject_values.shape[:2] != ids.shape:
                raise ShapeError("injection values must be (B, L, hidden) aligned with ids")
            x = torch.where(inject_mask.unsqueeze(-1), inject_values.to(x.dtype), x)
        return x

    def forward(
        self,
        ids: torch.Tensor,
        inject_values: Optional[torch.Tensor] = None,
        inject_mask: Optional[torch.Tensor] = None
    ) -> BackboneOutput:
        """
        Args:
            ids: (B, L) global token ids (slot positions hold any valid id)
            inject_values: (B, L, hidden) continuous rows for slot positions
            inject_mask: (B, L) True where a slot takes its injected row

        Returns:
            BackboneOutput with logits (B, L, V) and, when enabled, mtp_logits
        """
        if ids.dim() != 2:
            raise ShapeError(f"ids must be (B, L), got {tuple(ids.shape)}")
        length = ids.shape[1]
        if length > self.context_limit:
            raise ShapeError(f"sequence of {length} exceeds context {self.context_limit}")

        x = self.embed(ids, inject_values, inject_mask)
        cos, sin = rotary_tables(length, self.cfg.hidden // self.cfg.heads, self.cfg.rope_base,
                                 device=x.device, dtype=x.dtype)
        for block in self.layers:
            x = block(x, cos, sin)
        hidden = x
        logits = self.output_head(self.norm(hidden))

        mtp_logits = None
        if self.mtp_layers is not None:
            h = hidden
            for block in self.mtp_layers:
                h = block(h, cos, sin)
            mtp_logits = self.mtp_output_head(self.mtp_norm(h))
        return BackboneOutput(logits=logits, mtp_logits=mtp_logits, hidden=hidden)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def weighted_ce_sum(logits: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Weighted cross-entropy before normalization

    Returns:
        (sum of weight * CE over targeted positions, sum of weights)
    """
    if logits.shape[:-1] != targets.shape or targets.shape != weights.shape:
        raise ShapeError(f"logits {tuple(logits.shape)}, targets {tuple(targets.shape)} "
                         f"and weights {tuple(weights.shape)} disagree")
    valid = targets != IGNORE_INDEX
    w = torch.where(valid, weights.to(logits.dtype), torch.zeros((), dtype=logits.dtype, device=logits.device))
    ce = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        targets.clamp_min(0).reshape(-1),
        reduction='none'
    ).view_as(w)
    return (ce * w).sum(), w.sum()


def weighted_ce(logits: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted CE normalized by the sum of weights; all-zero weights are an error"""
    numerator, denominator = weighted_ce_sum(logits, targets, weights)
    if float(denominator) <= 0:
        raise LossError("all loss weights are zero")
    return numerator / denominator


def backbone_loss(
    logits: torch.Tensor,
    mtp_logits: Optional[torch.Tensor],
    targets: torch.Tensor,
    weights: torch.Tensor,
    mtp: MtpConfig
) -> LossOutput:
    """
    total = CE(main) + weight * CE(mtp)

    Args:
        logits: (B, L, V) main logits; position t predicts targets[:, t]
        mtp_logits: (B, L, V) or None; position t predicts targets[:, t + 1]
        targets: (B, L - 1) next-token targets, IGNORE_INDEX where untargeted
        weights: (B, L - 1) per-target weights
        mtp: MTP settings

    Returns:
        LossOutput(total, main, aux)
    """
    main = weighted_ce(logits[:, :-1], targets, weights)
    aux = torch.zeros((), dtype=main.dtype, device=main.device)
    if mtp.enabled and mtp_logits is not None and targets.shape[1] > 1:
        numerator, denominator = weighted_ce_sum(mtp_logits[:, :-2], targets[:, 1:], weights[:, 1:])
        if float(denominator) > 0:
            aux = numerator / denominator
    return combine_losses(main, aux, mtp.weight if mtp.enabled else 0.0)


def combine_losses(main: torch.Tensor, aux: torch.Tensor, weight: float) -> LossOutput:
    if weight < 0:
        raise LossError(f"MTP weight must be >= 0, got {weight}")
    total = main + weight * aux if weight else main
    return LossOutput(total=total, main=main, aux=aux)


# ---------------------------------------------------------------------------
# Constrained sampling
# ---------------------------------------------------------------------------

class SamplerMode(str, Enum):
    FREE = 'free'
    VISION_SPAN = 'vision_span'
    AUDIO_SPAN = 'audio_span'
    THINK = 'think'


@dataclass
class SamplerState:
    mode: SamplerMode = SamplerMode.FREE
    temperature: float = 1.0
    top_k: int = 0
    vision_count: int = 0
    audio_count: int = 0
    # force an audio span of exactly this many codes
    audio_target: Optional[int] = None

    @classmethod
    def from_config(cls, cfg: SamplerConfig, audio_target: Optional[int] = None) -> 'SamplerState':
        return cls(temperature=cfg.temperature, top_k=cfg.top_k, audio_target=audio_target)


@dataclass
class CompletedSpan:
    modality: str
    local_ids: List[int]


@dataclass
class GenerationResult:
    tokens: List[int]
    spans: List[CompletedSpan] = field(default_factory=list)
    decoded: List[Tuple[str, torch.Tensor]] = field(default_factory=list)
    stopped: bool = False


class ConstrainedSampler:
    """
    Modality state machine over the unified vocabulary

    After vision-start only vision ids are allowed for exactly 729 steps, then
    only vision-end. After audio-start only audio ids or audio-end. Think-close
    is reachable only inside a think block.
    """

    def __init__(self, layout: VocabLayout, span_length: int = VISION_SPAN_LENGTH):
        self.layout = layout
        self.span_length = span_length
        sp = layout.special
        self.vision_start, self.vision_end = sp(prompts.VISION_START), sp(prompts.VISION_END)
        self.audio_start, self.audio_end = sp(prompts.AUDIO_START), sp(prompts.AUDIO_END)
        self.think_open, self.think_close = sp(prompts.THINK_OPEN), sp(prompts.THINK_CLOSE)
        self.stop_ids = {sp(prompts.END_OF_TEXT), sp(prompts.TURN_END)}

        total = layout.total
        vision = layout.region_mask(Region.VISION)
        audio = layout.region_mask(Region.AUDIO)
        text = layout.region_mask(Region.TEXT)

        def only(*ids):
            m = torch.zeros(total, dtype=torch.bool)
            m[list(ids)] = True
            return m

        free = ~(vision | audio)
        for name in (prompts.VISION_END, prompts.AUDIO_END, prompts.THINK_CLOSE,
                     prompts.PAD, prompts.SLOT):
            free[sp(name)] = False
        self.masks = {
            'free': free,
            'vision': vision,
            'vision_close': only(self.vision_end),
            'audio': audio | only(self.audio_end),
            'audio_body': audio,
            'audio_close': only(self.audio_end),
            'think': text | only(self.think_close),
        }

    def permitted(self, state: SamplerState) -> torch.Tensor:
        if state.mode is SamplerMode.VISION_SPAN:
            return self.masks['vision'] if state.vision_count < self.span_length else self.masks['vision_close']
        if state.mode is SamplerMode.AUDIO_SPAN:
            if state.audio_target is not None:
                return self.masks['audio_body'] if state.audio_count < state.audio_target else self.masks['audio_close']
            return self.masks['audio_body'] if state.audio_count == 0 else self.masks['audio']
        if state.mode is SamplerMode.THINK:
            return self.masks['think']
        return self.masks['free']

    def choose(self, logits: torch.Tensor, state: SamplerState, generator: torch.Generator) -> int:
        """Pick the next id from (V,) logits under the current mask"""
        mask = self.permitted(state).to(logits.device)
        masked = logits.masked_fill(~mask, float('-inf'))
        if state.temperature <= 0:
            token = int(masked.argmax())
        else:
            scaled = masked / state.temperature
            if state.top_k > 0:
                k = min(state.top_k, int(mask.sum()))
                v, _ = torch.topk(scaled, k)
                scaled = scaled.masked_fill(scaled < v[-1], float('-inf'))
            probs = torch.softmax(scaled.to(torch.float64), dim=-1).cpu()
            token = int(torch.multinomial(probs, 1, generator=generator))
        if not bool(mask[token]):
            raise AssertionError(f"sampler chose id {token} outside the permitted set in mode {state.mode.value}")
        return token

    def advance(self, state: SamplerState, token: int) -> Optional[str]:
        """
        Move the state machine past an emitted token

        Returns:
            Modality name when the token closes a span, else None
        """
        mode = state.mode
        if mode is SamplerMode.VISION_SPAN:
            if token == self.vision_end:
                if state.vision_count != self.span_length:
                    raise AssertionError(f"vision span closed after {state.vision_count} ids")
                state.mode = SamplerMode.FREE
                return 'image'
            state.vision_count += 1
            if state.vision_count > self.span_length:
                raise AssertionError("vision span counter exceeded the grid size")
        elif mode is SamplerMode.AUDIO_SPAN:
            if token == self.audio_end:
                state.mode = SamplerMode.FREE
                return 'audio'
            state.audio_count += 1
        elif mode is SamplerMode.THINK:
            if token == self.think_close:
                state.mode = SamplerMode.FREE
        else:
            if token == self.vision_start:
                state.mode, state.vision_count = SamplerMode.VISION_SPAN, 0
            elif token == self.audio_start:
                state.mode, state.audio_count = SamplerMode.AUDIO_SPAN, 0
            elif token == self.think_open:
                state.mode = SamplerMode.THINK
        return None

    def state_after_prompt(self, prompt_ids, state: SamplerState) -> SamplerState:
        """
        Replay the prompt so a prompt ending inside a span resumes in that span

        Prompt spans may hold injection slots, so only the mode and the
        discrete counters are tracked here.
        """
        for token in prompt_ids:
            token = int(token)
            if token == self.vision_start:
                state.mode, state.vision_count = SamplerMode.VISION_SPAN, 0
            elif token == self.audio_start:
                state.mode, state.audio_count = SamplerMode.AUDIO_SPAN, 0
            elif token == self.think_open:
                state.mode = SamplerMode.THINK
            elif token in (self.vision_end, self.audio_end, self.think_close):
                state.mode = SamplerMode.FREE
            elif state.mode is SamplerMode.VISION_SPAN and bool(self.masks['vision'][token]):
                state.vision_count += 1
            elif state.mode is SamplerMode.AUDIO_SPAN and bool(self.masks['audio_body'][token]):
                state.audio_count += 1
        return state


@torch.no_grad()
def generate(
    model: OmniBackbone,
    layout: VocabLayout,
    prompt_ids: torch.Tensor,
    state: SamplerState,
    max_new: int,
    seed: int = 0,
    inject_values: Optional[torch.Tensor] = None,
    inject_mask: Optional[torch.Tensor] = None,
    decoders: Optional[Mapping[str, ModalityDecoder]] = None,
    decoder_context: Optional[Mapping[str, Any]] = None
) -> GenerationResult:
    """
    Sample up to max_new tokens after a prompt under the modality state machine

    Completed vision spans go to decoders['image'] and completed audio spans
    to decoders['audio'] when given. Generation stops at end-of-text or
    turn-end emitted outside a span.

    Args:
        model: Backbone
        layout: Vocabulary layout
        prompt_ids: (L,) prompt ids
        state: Sampler settings and initial mode
        max_new: Maximum number of new tokens
        seed: Sampling seed
        inject_values: (L, hidden) rows for prompt slots
        inject_mask: (L,) prompt slot mask
        decoders: modality -> decoder
        decoder_context: modality -> extra passed to decode_span

    Returns:
        GenerationResult with the new tokens and completed spans
    """
    model.eval()
    sampler = ConstrainedSampler(layout)
    sampler.state_after_prompt(prompt_ids.tolist(), state)
    generator = torch.Generator().manual_seed(seed)
    device = model.embedding.weight.device

    ids = prompt_ids.to(device).unsqueeze(0)
    values = inject_values.to(device).unsqueeze(0) if inject_values is not None else None
    mask = inject_mask.to(device).unsqueeze(0) if inject_mask is not None else None
    result = GenerationResult(tokens=[])
    span_ids: List[int] = []

    for _ in range(max_new):
        # crop to the context window, as the nanoGPT sampling loop does
        window = ids[:, -model.context_limit:]
        window_mask = mask[:, -window.shape[1]:] if mask is not None else None
        window_values = values[:, -window.shape[1]:] if values is not None else None
        logits = model(window, window_values, window_mask).logits[0, -1]

        token = sampler.choose(logits, state, generator)
        in_span = state.mode in (SamplerMode.VISION_SPAN, SamplerMode.AUDIO_SPAN)
        closed = sampler.advance(state, token)
        result.tokens.append(token)

        if closed is not None:
            region = Region.VISION if closed == 'image' else Region.AUDIO
            offset = layout.offset(region)
            span = CompletedSpan(modality=closed, local_ids=[t - offset for t in span_ids])
            result.spans.append(span)
            if decoders and closed in decoders:
                extra = (decoder_context or {}).get(closed)
                result.decoded.append((closed, decoders[closed].decode_span(span.local_ids, seed=seed, context=extra)))
            logger.info(f"✓ completed {closed} span of {len(span.local_ids)} ids")
            span_ids = []
        elif in_span:
            span_ids.append(token)

        ids = torch.cat([ids, torch.tensor([[token]], device=device)], dim=1)
        if mask is not None:
            mask = torch.cat([mask, mask.new_zeros(1, 1)], dim=1)
            values = torch.cat([values, values.new_zeros(1, 1, values.shape[-1])], dim=1)
        if state.mode is SamplerMode.FREE and token in sampler.stop_ids:
            result.stopped = True
            break
    return result
