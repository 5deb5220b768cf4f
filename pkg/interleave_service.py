"""
Interleave Service - builds one causal sequence from heterogeneous segments

Discrete ids (text, vision tokens, audio codes) become inputs and shifted
targets; continuous embeddings occupy injection slots that are inputs only.
Chat turns and think blocks are rendered with the control tokens from
prompts.py.
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import torch

import prompts
from config import ShapeError, TemplateError, VocabError
from modality_vocab import ByteTokenizer, Region, REGION_ORDER, VocabLayout
from models.backbone import IGNORE_INDEX, VISION_SPAN_LENGTH

logger = logging.getLogger(__name__)


class SegmentKind(str, Enum):
    TEXT_IDS = 'text_ids'
    VISION_DISCRETE = 'vision_discrete'
    AUDIO_DISCRETE = 'audio_discrete'
    VISION_CONTINUOUS = 'vision_continuous'
    AUDIO_CONTINUOUS = 'audio_continuous'
    CONTROL = 'control'


class Role(str, Enum):
    SYSTEM = 'system'
    USER = 'user'
    ASSISTANT = 'assistant'


CONTINUOUS_KINDS = (SegmentKind.VISION_CONTINUOUS, SegmentKind.AUDIO_CONTINUOUS)
DISCRETE_REGION = {
    SegmentKind.TEXT_IDS: Region.TEXT,
    SegmentKind.VISION_DISCRETE: Region.VISION,
    SegmentKind.AUDIO_DISCRETE: Region.AUDIO,
}


@dataclass
class Segment:
    """
    One piece of a turn

    Discrete kinds carry region-local ``ids``; CONTROL carries global ids.
    Continuous kinds carry either ready ``embeddings`` (length x hidden) or a
    raw ``source`` plus its slot ``length``; the embeddings are then computed
    by the caller's resolver at batch time.
    """
    kind: SegmentKind
    role: Role = Role.USER
    ids: Optional[List[int]] = None
    embeddings: Optional[torch.Tensor] = None
    source: Optional[Any] = None
    length: Optional[int] = None
    # continuous vision span merged with the following discrete span (editing)
    edit_pair: bool = False
    # audio embeddings compressed to 1 Hz
    compressed: bool = False

    def __post_init__(self):
        self.kind = SegmentKind(self.kind)
        self.role = Role(self.role)
        if self.kind in CONTINUOUS_KINDS:
            if self.embeddings is not None:
                self.length = int(self.embeddings.shape[0])
            if not self.length or self.length < 1:
                raise ShapeError(f"{self.kind.value} segment needs embeddings or a positive length")
        else:
            self.ids = [int(i) for i in (self.ids or [])]
            if self.kind is SegmentKind.VISION_DISCRETE and len(self.ids) != VISION_SPAN_LENGTH:
                raise ShapeError(f"vision_discrete segment must hold {VISION_SPAN_LENGTH} ids, got {len(self.ids)}")

    def __len__(self) -> int:
        return self.length if self.kind in CONTINUOUS_KINDS else len(self.ids)


@dataclass
class Turn:
    role: Role
    segments: List[Segment] = field(default_factory=list)
    think: Optional[str] = None

    def __post_init__(self):
        try:
            self.role = Role(self.role)
        except ValueError:
            raise TemplateError(f"unknown role {self.role!r}") from None


@dataclass(frozen=True)
class MaskFactors:
    text: float = 1.0
    vision: float = 1.0
    audio: float = 1.0

    def __post_init__(self):
        for name in ('text', 'vision', 'audio'):
            if getattr(self, name) < 0:
                raise ShapeError(f"mask factor {name} must be >= 0")

    def for_region(self, region: Region) -> float:
        if region is Region.VISION:
            return self.vision
        if region is Region.AUDIO:
            return self.audio
        # control tokens are weighted as text
        return self.text

    def replace(self, **changes) -> 'MaskFactors':
        values = self.to_dict()
        values.update(changes)
        return MaskFactors(**values)

    def to_dict(self) -> Dict[str, float]:
        return {'text': self.text, 'vision': self.vision, 'audio': self.audio}


@dataclass
class SlotSpan:
    """A run of injection slots and where its embeddings come from"""
    kind: SegmentKind
    start: int
    length: int
    embeddings: Optional[torch.Tensor] = None
    source: Optional[Any] = None
    compressed: bool = False


@dataclass
class ModelInput:
    """
    input_ids: (L,) global ids; slot positions hold the slot token
    slot_mask: (L,) True at injection slots
    targets: (L - 1,) next-token targets, IGNORE_INDEX where untargeted
    weights: (L - 1,) float64 loss weights
    """
    input_ids: torch.Tensor
    slot_mask: torch.Tensor
    targets: torch.Tensor
    weights: torch.Tensor
    slot_spans: List[SlotSpan] = field(default_factory=list)
    # (opener, end) of every modality span, end one past its closer
    span_bounds: List[Tuple[int, int]] = field(default_factory=list)
    tags: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.input_ids.shape[0])

    @property
    def targeted(self) -> torch.Tensor:
        return self.targets != IGNORE_INDEX

    def inject_values(
        self,
        hidden: int,
        resolver: Optional[Callable[[SlotSpan], torch.Tensor]] = None,
        dtype=torch.float32
    ) -> torch.Tensor:
        """(L, hidden) rows for the slots, zeros elsewhere"""
        values = torch.zeros(len(self), hidden, dtype=dtype)
        pieces = []
        for span in self.slot_spans:
            emb = span.embeddings
            if emb is None:
                if resolver is None:
                    raise ShapeError(f"slot span at {span.start} has no embeddings and no resolver")
                emb = resolver(span)
            if tuple(emb.shape) != (span.length, hidden):
                raise ShapeError(f"slot span at {span.start} expects ({span.length}, {hidden}), got {tuple(emb.shape)}")
            pieces.append((span.start, emb))
        if not pieces:
            return values
        # keep the autograd graph of resolved embeddings
        parts, cursor = [], 0
        for start, emb in pieces:
            if start > cursor:
                parts.append(values[cursor:start])
            parts.append(emb.to(dtype))
            cursor = start + emb.shape[0]
        if cursor < len(self):
            parts.append(values[cursor:])
        return torch.cat(parts, dim=0)

    def truncate(self, max_length: int) -> 'ModelInput':
        """
        Keep at most max_length positions without splitting a modality span

        A span the limit would cross is dropped whole, opener included, so
        every kept vision span still holds 729 ids or only slots.
        """
        if len(self) <= max_length:
            return self
        cut = max_length
        for opener, end in self.span_bounds:
            if opener < cut < end:
                cut = opener
                break
        spans = [s for s in self.slot_spans if s.start + s.length <= cut]
        return ModelInput(
            input_ids=self.input_ids[:cut],
            slot_mask=self.slot_mask[:cut],
            targets=self.targets[:max(cut - 1, 0)],
            weights=self.weights[:max(cut - 1, 0)],
            slot_spans=spans,
            span_bounds=[(o, e) for o, e in self.span_bounds if e <= cut],
            tags=dict(self.tags, truncated=True),
        )

    def to_record(self) -> Dict[str, Any]:
        return {
            'ids': self.input_ids.tolist(),
            'slots': [int(i) for i in torch.nonzero(self.slot_mask).flatten()],
            'targets': self.targets.tolist(),
            'weights': self.weights.tolist(),
            'tags': {k: v for k, v in self.tags.items() if isinstance(v, (str, int, float, bool))},
        }


# ---------------------------------------------------------------------------
# Templates
# ---------------------------------------------------------------------------

def text_segment(tokenizer: ByteTokenizer, text: str, role: Union[Role, str] = Role.USER) -> Segment:
    return Segment(kind=SegmentKind.TEXT_IDS, role=role, ids=tokenizer.encode(text))


def control_segment(layout: VocabLayout, names: Sequence[str], role: Union[Role, str]) -> Segment:
    return Segment(kind=SegmentKind.CONTROL, role=role, ids=[int(layout.special(n)) for n in names])


def _check_roles(turns: Sequence[Turn]) -> None:
    expected = Role.USER
    for index, turn in enumerate(turns):
        if turn.role is Role.SYSTEM:
            if index != 0:
                raise TemplateError("a system turn may only open the conversation")
            continue
        if turn.role is not expected:
            raise TemplateError(f"turn {index} is {turn.role.value}, expected {expected.value}")
        expected = Role.ASSISTANT if expected is Role.USER else Role.USER


def render_template(
    conversation: Sequence[Union[Turn, Tuple[str, List[Segment]]]],
    layout: VocabLayout,
    tokenizer: ByteTokenizer,
    think: Optional[str] = None
) -> List[Segment]:
    """
    Wrap turns with turn-start / role / turn-end and place think text in a
    think block at the start of the assistant's reply

    Args:
        conversation: Turns, or (role, segments) pairs
        layout: Vocabulary layout for control ids
        tokenizer: Tokenizes think text
        think: Think text (or intent key) for the final turn, which must be
            an assistant turn

    Returns:
        Flat segment list; modality segments are wrapped later by assemble()
    """
    turns = [t if isinstance(t, Turn) else Turn(role=t[0], segments=list(t[1])) for t in conversation]
    if not turns:
        if think is not None:
            raise TemplateError("think text given for an empty conversation")
        return []
    _check_roles(turns)
    if think is not None:
        if turns[-1].role is not Role.ASSISTANT:
            raise TemplateError("think blocks are only allowed on assistant turns")
        turns[-1].think = think

    segments: List[Segment] = []
    for turn in turns:
        if turn.think is not None and turn.role is not Role.ASSISTANT:
            raise TemplateError("think blocks are only allowed on assistant turns")
        role_token = prompts.ROLE_TOKENS[turn.role.value]
        segments.append(control_segment(layout, [prompts.TURN_START, role_token], turn.role))
        if turn.think is not None:
            segments.append(control_segment(layout, [prompts.THINK_OPEN], turn.role))
            segments.append(text_segment(tokenizer, prompts.think_text(turn.think), turn.role))
            segments.append(control_segment(layout, [prompts.THINK_CLOSE], turn.role))
        for seg in turn.segments:
            seg.role = turn.role
            segments.append(seg)
        segments.append(control_segment(layout, [prompts.TURN_END], turn.role))
    return segments


def generation_prefix(layout: VocabLayout, modality: str, role: Role = Role.ASSISTANT) -> Segment:
    """Open an assistant turn, and a vision/audio span when that modality is requested"""
    names = [prompts.TURN_START, prompts.ROLE_TOKENS[role.value]]
    if modality == 'image':
        names.append(prompts.VISION_START)
    elif modality == 'audio':
        names.append(prompts.AUDIO_START)
    return control_segment(layout, names, role)


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

_SPAN_TOKENS = {
    SegmentKind.VISION_DISCRETE: (prompts.VISION_START, prompts.VISION_END),
    SegmentKind.VISION_CONTINUOUS: (prompts.VISION_START, prompts.VISION_END),
    SegmentKind.AUDIO_DISCRETE: (prompts.AUDIO_START, prompts.AUDIO_END),
    SegmentKind.AUDIO_CONTINUOUS: (prompts.AUDIO_START, prompts.AUDIO_END),
}


def assemble(
    segments: Sequence[Segment],
    layout: VocabLayout,
    factors: MaskFactors = MaskFactors(),
    target_roles: Optional[Set[Role]] = None,
    close_last_span: bool = True
) -> ModelInput:
    """
    Concatenate segments into one ModelInput

    Modality segments are wrapped in their start/end tokens; a continuous
    vision segment tagged edit_pair shares one span with the discrete vision
    segment after it. Every discrete position after the first is a target
    weighted by its region's factor; slots are never targets.

    Args:
        segments: Ordered segments
        layout: Vocabulary layout
        factors: Per-modality loss factors
        target_roles: When set, positions from other roles get weight 0
        close_last_span: False leaves a trailing prompt span open

    Returns:
        ModelInput
    """
    slot_id = int(layout.special(prompts.SLOT))
    ids: List[int] = []
    is_slot: List[bool] = []
    roles: List[Role] = []
    spans: List[SlotSpan] = []
    bounds: List[Tuple[int, int]] = []

    def emit(values: Iterable[int], role: Role, slot: bool = False):
        for v in values:
            ids.append(int(v))
            is_slot.append(slot)
            roles.append(role)

    i = 0
    while i < len(segments):
        seg = segments[i]
        if seg.kind is SegmentKind.CONTROL:
            _check_ids(seg.ids, layout, Region.SPECIALS, global_ids=True)
            emit(seg.ids, seg.role)
            i += 1
            continue
        if seg.kind is SegmentKind.TEXT_IDS:
            _check_ids(seg.ids, layout, Region.TEXT)
            emit((layout.offset(Region.TEXT) + t for t in seg.ids), seg.role)
            i += 1
            continue

        start_name, end_name = _SPAN_TOKENS[seg.kind]
        opener = len(ids)
        emit([layout.special(start_name)], seg.role)
        group = [seg]
        if seg.edit_pair:
            if i + 1 >= len(segments) or segments[i + 1].kind is not SegmentKind.VISION_DISCRETE \
                    or seg.kind is not SegmentKind.VISION_CONTINUOUS:
                raise ShapeError("an edit pair is a continuous vision segment followed by a discrete one")
            group.append(segments[i + 1])
        for part in group:
            if part.kind in CONTINUOUS_KINDS:
                spans.append(SlotSpan(kind=part.kind, start=len(ids), length=part.length,
                                      embeddings=part.embeddings, source=part.source,
                                      compressed=part.compressed))
                emit([slot_id] * part.length, part.role, slot=True)
            else:
                region = DISCRETE_REGION[part.kind]
                _check_ids(part.ids, layout, region)
                emit((layout.offset(region) + t for t in part.ids), part.role)
        i += len(group)
        if close_last_span or i < len(segments):
            emit([layout.special(end_name)], seg.role)
        bounds.append((opener, len(ids)))

    input_ids = torch.tensor(ids, dtype=torch.long)
    slot_mask = torch.tensor(is_slot, dtype=torch.bool)
    if len(ids) < 2:
        targets = torch.empty(0, dtype=torch.long)
        weights = torch.empty(0, dtype=torch.float64)
    else:
        targets = input_ids[1:].clone()
        targets[slot_mask[1:]] = IGNORE_INDEX
        regions = layout.region_of_ids(input_ids[1:])
        factor_table = torch.tensor([factors.for_region(r) for r in REGION_ORDER], dtype=torch.float64)
        weights = factor_table[regions]
        weights[slot_mask[1:]] = 0.0
        if target_roles is not None:
            keep = torch.tensor([r in target_roles for r in roles[1:]], dtype=torch.bool)
            targets[~keep] = IGNORE_INDEX
            weights[~keep] = 0.0
    return ModelInput(input_ids=input_ids, slot_mask=slot_mask, targets=targets, weights=weights,
                      slot_spans=spans, span_bounds=bounds)


def _check_ids(ids: Sequence[int], layout: VocabLayout, region: Region, global_ids: bool = False) -> None:
    if not ids:
        return
    low, high = layout.region_range(region) if global_ids else (0, layout.size(region))
    bad = [i for i in ids if not low <= i < high]
    if bad:
        raise VocabError(f"{len(bad)} id(s) outside the {region.value} region, first {bad[0]}")


def loss_weights_histogram(model_input: ModelInput, layout: VocabLayout) -> Dict[str, float]:
    """Sum of target weights per region of each target id (slots contribute nothing)"""
    sums = {r.value: 0.0 for r in REGION_ORDER}
    targeted = model_input.targeted
    if not bool(targeted.any()):
        return sums
    regions = layout.region_of_ids(model_input.targets[targeted])
    weights = model_input.weights[targeted]
    for index, region in enumerate(REGION_ORDER):
        sums[region.value] = float(weights[regions == index].sum())
    return sums


def span_report(model_input: ModelInput, layout: VocabLayout) -> List[Tuple[str, int, int]]:
    """
    (modality, discrete count, slot count) for every vision/audio span

    Used to audit span integrity.
    """
    sp = layout.special
    opens = {int(sp(prompts.VISION_START)): 'vision', int(sp(prompts.AUDIO_START)): 'audio'}
    closes = {int(sp(prompts.VISION_END)): 'vision', int(sp(prompts.AUDIO_END)): 'audio'}
    report, current = [], None
    for token, slot in zip(model_input.input_ids.tolist(), model_input.slot_mask.tolist()):
        if current is None:
            if token in opens:
                current = [opens[token], 0, 0]
        elif token in closes and not slot:
            report.append(tuple(current))
            current = None
        elif slot:
            current[2] += 1
        else:
            current[1] += 1
    return report


def dump_jsonl(inputs: Iterable[ModelInput], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for item in inputs:
            f.write(json.dumps(item.to_record()) + '\n')
    return path


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    ids: torch.Tensor
    inject_values: Optional[torch.Tensor]
    inject_mask: torch.Tensor
    targets: torch.Tensor
    weights: torch.Tensor


def collate(
    inputs: Sequence[ModelInput],
    layout: VocabLayout,
    hidden: int,
    resolver: Optional[Callable[[SlotSpan], torch.Tensor]] = None,
    dtype=torch.float32
) -> Batch:
    """Right-pad to the longest item; padding is untargeted"""
    if not inputs:
        raise ShapeError("cannot collate an empty batch")
    pad = int(layout.special(prompts.PAD))
    length = max(len(x) for x in inputs)
    if length < 2:
        raise ShapeError("every batch needs at least one target position")
    b = len(inputs)
    ids = torch.full((b, length), pad, dtype=torch.long)
    mask = torch.zeros((b, length), dtype=torch.bool)
    targets = torch.full((b, length - 1), IGNORE_INDEX, dtype=torch.long)
    weights = torch.zeros((b, length - 1), dtype=torch.float64)
    rows = []
    any_slots = any(bool(x.slot_mask.any()) for x in inputs)
    for i, item in enumerate(inputs):
        n = len(item)
        ids[i, :n] = item.input_ids
        mask[i, :n] = item.slot_mask
        targets[i, :n - 1] = item.targets
        weights[i, :n - 1] = item.weights
        if any_slots:
            values = item.inject_values(hidden, resolver, dtype)
            if n < length:
                values = torch.cat([values, values.new_zeros(length - n, hidden)], dim=0)
            rows.append(values)
    inject = torch.stack(rows) if any_slots else None
    return Batch(ids=ids, inject_values=inject, inject_mask=mask, targets=targets, weights=weights)
