"""
Unified token space

Global ids are laid out as contiguous regions:

    [0, S)            special / control tokens
    [S, S+T)          text (byte-level BPE)
    [S+T, S+T+V)      vision codebook
    [S+T+V, total)    audio codebook (FSQ lattice)

Also owns the freeze masks used while the modality rows are trained
(vocabulary expansion) and the adapter-only alignment stages.
"""
import bisect
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NewType, Optional, Sequence, Tuple

import torch

from config import VocabConfig, VocabError

logger = logging.getLogger(__name__)

TokenId = NewType('TokenId', int)

REQUIRED_CONTROL_TOKENS = (
    "<|im_start|>", "<|im_end|>", "<think>", "</think>",
    "<|vision_start|>", "<|vision_end|>", "<|audio_start|>", "<|audio_end|>",
    "<|speaker_ref|>",
)


class Region(str, Enum):
    SPECIALS = 'specials'
    TEXT = 'text'
    VISION = 'vision'
    AUDIO = 'audio'


REGION_ORDER = (Region.SPECIALS, Region.TEXT, Region.VISION, Region.AUDIO)


@dataclass(frozen=True)
class VocabLayout:
    """Immutable region table; safe to share between threads"""
    special_tokens: Tuple[str, ...]
    text_size: int
    vision_codebook_size: int
    audio_codebook_size: int
    region_offsets: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        sizes = (len(self.special_tokens), self.text_size, self.vision_codebook_size, self.audio_codebook_size)
        offsets, running = [], 0
        for size in sizes:
            offsets.append(running)
            running += size
        object.__setattr__(self, 'region_offsets', tuple(offsets))
        object.__setattr__(self, '_sizes', sizes)
        object.__setattr__(self, '_special_index', {name: i for i, name in enumerate(self.special_tokens)})

    @property
    def total(self) -> int:
        return self.region_offsets[-1] + self._sizes[-1]

    def size(self, region: Region) -> int:
        return self._sizes[REGION_ORDER.index(Region(region))]

    def offset(self, region: Region) -> int:
        return self.region_offsets[REGION_ORDER.index(Region(region))]

    def region_range(self, region: Region) -> Tuple[int, int]:
        start = self.offset(region)
        return (start, start + self.size(region))

    def special(self, name: str) -> TokenId:
        """Global id of a named control token"""
        try:
            return TokenId(self._special_index[name])
        except KeyError:
            raise VocabError(f"unknown control token {name!r}") from None

    def region_mask(self, region: Region, device=None) -> torch.Tensor:
        mask = torch.zeros(self.total, dtype=torch.bool, device=device)
        start, end = self.region_range(region)
        mask[start:end] = True
        return mask

    def region_of_ids(self, ids: torch.Tensor) -> torch.Tensor:
        """Region index (0..3, REGION_ORDER) for every id in a tensor"""
        boundaries = torch.tensor(self.region_offsets[1:], dtype=ids.dtype, device=ids.device)
        return torch.bucketize(ids, boundaries, right=True)

    def to_dict(self) -> Dict[str, object]:
        return {
            'special_tokens': list(self.special_tokens),
            'text_size': self.text_size,
            'vision_size': self.vision_codebook_size,
            'audio_size': self.audio_codebook_size,
            'region_offsets': list(self.region_offsets),
            'total': self.total,
        }


def build_layout(
    special_names: Sequence[str],
    text_size: int,
    vision_size: int,
    audio_size: int
) -> VocabLayout:
    """
    Build the region table

    Args:
        special_names: Ordered control-token names (must be unique)
        text_size: Number of text ids
        vision_size: Vision codebook size
        audio_size: Audio codebook size

    Returns:
        VocabLayout with specials first, then text, vision, audio
    """
    names = list(special_names)
    if len(set(names)) != len(names):
        dupes = sorted(n for n, c in Counter(names).items() if c > 1)
        raise VocabError(f"duplicate special token names: {dupes}")
    for label, size in (('specials', len(names)), ('text', text_size),
                        ('vision', vision_size), ('audio', audio_size)):
        if size <= 0:
            raise VocabError(f"region '{label}' must be non-empty, got size {size}")
    return VocabLayout(tuple(names), int(text_size), int(vision_size), int(audio_size))


def layout_from_config(cfg: VocabConfig) -> VocabLayout:
    layout = build_layout(cfg.special_tokens, cfg.text_size, cfg.vision_size, cfg.audio_size)
    missing = [name for name in REQUIRED_CONTROL_TOKENS if name not in cfg.special_tokens]
    if missing:
        raise VocabError(f"control tokens missing from the layout: {missing}")
    return layout


def global_id(layout: VocabLayout, region: Region, local_id: int) -> TokenId:
    size = layout.size(region)
    if not 0 <= local_id < size:
        raise VocabError(f"local id {local_id} out of range for region {Region(region).value} (size {size})")
    return TokenId(layout.offset(region) + int(local_id))


def resolve(layout: VocabLayout, token_id: int) -> Tuple[Region, int]:
    """Exact inverse of global_id"""
    if not 0 <= token_id < layout.total:
        raise VocabError(f"token id {token_id} outside [0, {layout.total})")
    index = bisect.bisect_right(layout.region_offsets, token_id) - 1
    region = REGION_ORDER[index]
    return region, int(token_id) - layout.region_offsets[index]


def dump_tsv(layout: VocabLayout, tokenizer: Optional['ByteTokenizer'], path: Path) -> Path:
    """Write the token-name <-> id table as UTF-8 TSV"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write("id\tregion\tlocal_id\tname\n")
        for token in range(layout.total):
            region, local = resolve(layout, token)
            if region is Region.SPECIALS:
                name = layout.special_tokens[local]
            elif region is Region.TEXT:
                name = tokenizer.token_name(local) if tokenizer else f"text:{local}"
            else:
                name = f"{region.value}:{local}"
            f.write(f"{token}\t{region.value}\t{local}\t{name}\n")
    logger.info(f"✓ Wrote {layout.total} vocabulary rows to {path}")
    return path


# ---------------------------------------------------------------------------
# Text tokenizer
# ---------------------------------------------------------------------------

class ByteTokenizer:
    """
    Byte-level BPE: 256 byte tokens plus learned merges up to text_size

    Local ids are text-region ids; callers shift by the region offset.
    """

    def __init__(self, text_size: int, merges: Optional[List[Tuple[int, int]]] = None):
        if text_size < 256:
            raise VocabError(f"text_size {text_size} cannot hold the 256 byte tokens")
        self.text_size = text_size
        self.merges: List[Tuple[int, int]] = [tuple(m) for m in (merges or [])][: text_size - 256]
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._pieces: List[bytes] = [bytes([b]) for b in range(256)]
        for a, b in self.merges:
            self._pieces.append(self._pieces[a] + self._pieces[b])

    @classmethod
    def train(cls, texts: Iterable[str], text_size: int) -> 'ByteTokenizer':
        """Greedy BPE training; ties broken by the smallest pair"""
        sequences = [list(t.encode('utf-8')) for t in texts]
        merges: List[Tuple[int, int]] = []
        next_id = 256
        while next_id < text_size:
            counts = Counter()
            for seq in sequences:
                counts.update(zip(seq, seq[1:]))
            if not counts:
                break
            best_count = max(counts.values())
            if best_count < 2:
                break
            pair = min(p for p, c in counts.items() if c == best_count)
            merges.append(pair)
            sequences = [_merge_pair(seq, pair, next_id) for seq in sequences]
            next_id += 1
        logger.info(f"✓ Trained byte tokenizer: {len(merges)} merges, text_size {text_size}")
        return cls(text_size, merges)

    def encode(self, text: str) -> List[int]:
        seq = list(text.encode('utf-8'))
        while len(seq) > 1:
            ranked = [(self._ranks.get(p, None), p) for p in zip(seq, seq[1:])]
            ranked = [(r, p) for r, p in ranked if r is not None]
            if not ranked:
                break
            rank, pair = min(ranked)
            seq = _merge_pair(seq, pair, 256 + rank)
        return seq

    def decode(self, ids: Sequence[int]) -> str:
        return b''.join(self._pieces[i] for i in ids if 0 <= i < len(self._pieces)).decode('utf-8', errors='replace')

    def token_name(self, local_id: int) -> str:
        if local_id < len(self._pieces):
            return 'text:' + self._pieces[local_id].hex()
        return f"text:unused{local_id}"

    def to_dict(self) -> Dict[str, object]:
        return {'text_size': self.text_size, 'merges': [list(m) for m in self.merges]}

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> 'ByteTokenizer':
        return cls(int(data['text_size']), [tuple(m) for m in data.get('merges', [])])

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()), encoding='utf-8')
        return path

    @classmethod
    def load(cls, path: Path) -> 'ByteTokenizer':
        return cls.from_dict(json.loads(Path(path).read_text(encoding='utf-8')))


def _merge_pair(seq: List[int], pair: Tuple[int, int], new_id: int) -> List[int]:
    out, i = [], 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


# ---------------------------------------------------------------------------
# Freeze masks
# ---------------------------------------------------------------------------

class FreezePolicy(str, Enum):
    VOCAB_EXPANSION = 'vocab_expansion'
    FULL = 'full'
    ADAPTER_ONLY = 'adapter_only'


# Parameter groups whose rows follow the vocabulary layout
ROW_GROUPS = ('embedding', 'output_head', 'mtp_output_head')
LAYER_GROUPS = ('decoder_layers', 'mtp_layers')


@dataclass
class FreezeMask:
    """
    Per-parameter freeze state

    ``frozen`` maps parameter name -> True (whole tensor frozen);
    ``frozen_rows`` maps parameter name -> bool tensor over dim 0.
    ``version`` stamps the mask so a training step can prove it used the
    current one.
    """
    frozen: Dict[str, bool] = field(default_factory=dict)
    frozen_rows: Dict[str, torch.Tensor] = field(default_factory=dict)
    version: int = 0

    def is_frozen(self, name: str) -> bool:
        return self.frozen.get(name, False)

    def frozen_entry_count(self, params: Mapping[str, torch.Tensor]) -> int:
        count = 0
        for name, param in params.items():
            if self.frozen.get(name):
                count += param.numel()
            elif name in self.frozen_rows:
                rows = int(self.frozen_rows[name].sum())
                count += rows * (param.numel() // max(param.shape[0], 1))
        return count

    def union(self, other: 'FreezeMask') -> 'FreezeMask':
        frozen = {k: True for k, v in {**self.frozen, **other.frozen}.items() if v}
        rows = dict(self.frozen_rows)
        for name, mask in other.frozen_rows.items():
            rows[name] = rows[name] | mask if name in rows else mask.clone()
        return FreezeMask(frozen=frozen, frozen_rows=rows, version=max(self.version, other.version))

    def apply_requires_grad(self, params: Mapping[str, torch.nn.Parameter]) -> None:
        for name, param in params.items():
            param.requires_grad_(not self.frozen.get(name, False))

    def zero_frozen_grads(self, params: Mapping[str, torch.nn.Parameter]) -> None:
        for name, mask in self.frozen_rows.items():
            param = params.get(name)
            if param is not None and param.grad is not None:
                param.grad[mask.to(param.grad.device)] = 0

    def snapshot(self, params: Mapping[str, torch.nn.Parameter]) -> Dict[str, torch.Tensor]:
        """Copy of every frozen row, taken before an optimizer step"""
        return {name: params[name].detach()[mask.to(params[name].device)].clone()
                for name, mask in self.frozen_rows.items() if name in params}

    def restore(self, params: Mapping[str, torch.nn.Parameter], snapshot: Mapping[str, torch.Tensor]) -> None:
        """Write frozen rows back so weight decay or momentum cannot move them"""
        with torch.no_grad():
            for name, rows in snapshot.items():
                mask = self.frozen_rows[name].to(params[name].device)
                params[name].data[mask] = rows


def expansion_freeze_mask(
    layout: VocabLayout,
    policy: FreezePolicy,
    registry: Mapping[str, Mapping[str, torch.nn.Parameter]],
    adapter_group: Optional[str] = None
) -> FreezeMask:
    """
    Compute the freeze mask for a training policy

    Args:
        layout: Vocabulary layout (decides which embedding/head rows are text)
        policy: vocab_expansion | full | adapter_only
        registry: group name -> {parameter name -> parameter}
        adapter_group: The group left trainable under adapter_only

    Returns:
        FreezeMask over every parameter in the registry
    """
    try:
        policy = FreezePolicy(policy)
    except ValueError:
        raise VocabError(f"unknown freeze policy {policy!r}") from None

    mask = FreezeMask()
    if policy is FreezePolicy.FULL:
        return mask

    if policy is FreezePolicy.ADAPTER_ONLY:
        if adapter_group is None or adapter_group not in registry:
            raise VocabError(f"adapter group {adapter_group!r} absent from parameter registry")
        for group, params in registry.items():
            if group == adapter_group:
                continue
            for name in params:
                mask.frozen[name] = True
        return mask

    for group in ('embedding', 'output_head', 'decoder_layers'):
        if group not in registry:
            raise VocabError(f"parameter group '{group}' absent from registry")

    modality_start = layout.offset(Region.VISION)
    for group, params in registry.items():
        for name, param in params.items():
            if group in ROW_GROUPS:
                if param.shape[0] != layout.total:
                    raise VocabError(f"{name} has {param.shape[0]} rows, layout has {layout.total}")
                rows = torch.zeros(param.shape[0], dtype=torch.bool)
                rows[:modality_start] = True
                mask.frozen_rows[name] = rows
            else:
                # decoder layers, norms, encoders: all frozen while the new rows learn
                mask.frozen[name] = True
    return mask
