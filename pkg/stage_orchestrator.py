"""
Stage Orchestrator - declarative training curriculum

A stage names its data mixture, freeze policy, loss-mask factors, token
budget, token-count triggers and context length. The orchestrator draws
mixture keys, asks the corpus registry for assembled samples, keeps the
consumed-token ledger and fires triggers exactly once.

Built-in ladder:
    T1-T3   text-only warm-up (optional, 256 -> 512 -> 1024 context, MTP on)
    P1-P3   vocabulary expansion, full pre-training, long context
    E1-E3   encoder alignment (vision adapter, full, audio adapter)
    S1-S4   supervised fine-tuning, S3a being the compressor-only warm-up
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import torch

from config import StageError
from interleave_service import MaskFactors, ModelInput, Role
from modality_vocab import FreezeMask, FreezePolicy, VocabLayout, expansion_freeze_mask

logger = logging.getLogger(__name__)


# Groups that no stage trains: the audio encoder is shared with the frozen
# audio tokenizer
ALWAYS_FROZEN_GROUPS = ('audio_encoder',)
VISION_ENCODER_GROUP = 'vision_encoder'

MUTABLE_FIELDS = ('mask.text', 'mask.vision', 'mask.audio', 'lr_scale')


@dataclass(frozen=True)
class Mutation:
    """Assignment applied to a live stage when a trigger fires"""
    field: str
    value: float

    def __post_init__(self):
        if self.field not in MUTABLE_FIELDS:
            raise StageError(f"unknown mutation target {self.field!r}; expected one of {MUTABLE_FIELDS}")

    def to_dict(self) -> Dict[str, Any]:
        return {'field': self.field, 'value': self.value}


@dataclass(frozen=True)
class Trigger:
    token_count: int
    mutation: Mutation

    def to_dict(self) -> Dict[str, Any]:
        return {'token_count': self.token_count, 'mutation': self.mutation.to_dict()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Trigger':
        return cls(token_count=int(data['token_count']), mutation=Mutation(**data['mutation']))


@dataclass
class StageSpec:
    name: str
    mixture: Dict[str, float]
    freeze_policy: FreezePolicy = FreezePolicy.FULL
    mask_factors: MaskFactors = field(default_factory=MaskFactors)
    token_budget: int = 1
    triggers: List[Trigger] = field(default_factory=list)
    context_length: int = 1024
    batch_size: int = 4
    adapter_group: Optional[str] = None
    mtp_enabled: bool = False
    vision_encoder_trainable: bool = False
    # None: every position is a target; SFT stages supervise assistant turns only
    target_roles: Optional[List[str]] = None
    requires: Optional[str] = None
    description: str = ""

    def __post_init__(self):
        try:
            self.freeze_policy = FreezePolicy(self.freeze_policy)
        except ValueError:
            raise StageError(f"stage {self.name}: unknown freeze policy {self.freeze_policy!r}") from None
        if isinstance(self.mask_factors, Mapping):
            self.mask_factors = MaskFactors(**self.mask_factors)
        self.triggers = [t if isinstance(t, Trigger) else Trigger.from_dict(t) for t in self.triggers]
        self.validate()

    def validate(self) -> 'StageSpec':
        if not self.mixture:
            raise StageError(f"stage {self.name}: empty mixture")
        bad = [k for k, w in self.mixture.items() if not w > 0]
        if bad:
            raise StageError(f"stage {self.name}: mixture weights must be > 0, got {bad}")
        if self.token_budget < 1:
            raise StageError(f"stage {self.name}: token budget must be >= 1")
        counts = [t.token_count for t in self.triggers]
        if counts != sorted(counts):
            raise StageError(f"stage {self.name}: triggers must be ordered by token count")
        if counts and counts[-1] >= self.token_budget:
            raise StageError(f"stage {self.name}: trigger at {counts[-1]} is not below budget {self.token_budget}")
        if self.freeze_policy is FreezePolicy.ADAPTER_ONLY and not self.adapter_group:
            raise StageError(f"stage {self.name}: adapter_only needs an adapter_group")
        if self.context_length < 2 or self.batch_size < 1:
            raise StageError(f"stage {self.name}: context_length >= 2 and batch_size >= 1 required")
        return self

    def fractions(self) -> Dict[str, float]:
        """Mixture weights normalized to sum to 1"""
        total = sum(self.mixture.values())
        return {k: w / total for k, w in self.mixture.items()}

    @property
    def supervised_roles(self) -> Optional[Set[Role]]:
        return {Role(r) for r in self.target_roles} if self.target_roles is not None else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'mixture': dict(self.mixture),
            'freeze_policy': self.freeze_policy.value,
            'mask_factors': self.mask_factors.to_dict(),
            'token_budget': self.token_budget,
            'triggers': [t.to_dict() for t in self.triggers],
            'context_length': self.context_length,
            'batch_size': self.batch_size,
            'adapter_group': self.adapter_group,
            'mtp_enabled': self.mtp_enabled,
            'vision_encoder_trainable': self.vision_encoder_trainable,
            'target_roles': list(self.target_roles) if self.target_roles is not None else None,
            'requires': self.requires,
            'description': self.description,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'StageSpec':
        return cls(**dict(data))


# ---------------------------------------------------------------------------
# Built-in curriculum
# ---------------------------------------------------------------------------

# Token volumes of the full-size recipe; scaled by budget_scale
REFERENCE_TOKENS = {
    'T1': 200e9, 'T2': 100e9, 'T3': 50e9,
    'P1': 302e9, 'P2': 2.3e12, 'P3': 20e9,
    'E1': 50e9, 'E2': 1.5e12, 'E3': 20e9,
    'S1': 200e9, 'S2': 100e9, 'S3a': 5e9, 'S3': 100e9, 'S4': 50e9,
}
# P2 runs its first trillion tokens with the vision loss halved
P2_VISION_RESTORE_TOKENS = 1e12

# Full-size context ladder 4K / 8K / 32K mapped to 256 / 512 / 1024. P1 and P2 stay at
# 1024 too: a caption pair holds a 729-token vision span plus its controls and text,
# which does not fit in 512. P3 keeps the same window with a smaller batch.
CONTEXT_LADDER = {'T1': 256, 'T2': 512, 'T3': 1024, 'P1': 1024, 'P2': 1024, 'P3': 1024}
# Alignment and SFT samples carry an edit pair (two 729-token spans)
SFT_CONTEXT = 2048

TEXT_PRETRAIN_ORDER = ('T1', 'T2', 'T3')
STAGE_ORDER = ('P1', 'P2', 'P3', 'E1', 'E2', 'E3', 'S1', 'S2', 'S3a', 'S3', 'S4')

ASSISTANT_ONLY = ['assistant']


def _even(keys: Sequence[str], share: float) -> Dict[str, float]:
    return {k: share / len(keys) for k in keys}


def _budget(name: str, scale: float) -> int:
    return max(1, int(round(REFERENCE_TOKENS[name] * scale)))


def builtin_stages(budget_scale: float = 1e-6, with_text_pretrain: bool = False) -> List[StageSpec]:
    """
    The built-in ladder, token budgets scaled from the full-size recipe

    Args:
        budget_scale: Multiplier applied to every full-size token volume
        with_text_pretrain: Prepend the T1-T3 text ladder

    Returns:
        Ordered StageSpec list
    """
    if budget_scale <= 0:
        raise StageError(f"budget_scale must be > 0, got {budget_scale}")

    def b(name: str) -> int:
        return _budget(name, budget_scale)

    text_ladder = [
        StageSpec(name='T1', mixture={'text': 1.0}, context_length=256, batch_size=16,
                  token_budget=b('T1'), mtp_enabled=True,
                  description="text-only pre-training, short context"),
        StageSpec(name='T2', mixture={'text': 1.0}, context_length=512, batch_size=8,
                  token_budget=b('T2'), mtp_enabled=True, requires='T1',
                  description="text-only pre-training, medium context"),
        StageSpec(name='T3', mixture={'text': 1.0}, context_length=1024, batch_size=4,
                  token_budget=b('T3'), mtp_enabled=True, requires='T2',
                  description="text-only pre-training, long context"),
    ]

    p2_budget = b('P2')
    restore_at = min(int(round(P2_VISION_RESTORE_TOKENS * budget_scale)), p2_budget - 1)

    sft_rest_s1 = ('caption', 'asr', 'tts', 't2i', 'edit')
    sft_rest_s2 = ('caption', 'vqa', 'ocr', 'asr', 'tts', 't2i', 'edit', 'av_speech')
    sft_rest_s3 = ('chat', 'caption', 'vqa', 'asr', 'tts', 't2i', 'edit', 'av_speech')

    stages = [
        StageSpec(name='P1', mixture={'image': 0.75, 'audio': 0.25},
                  freeze_policy=FreezePolicy.VOCAB_EXPANSION,
                  token_budget=b('P1'), context_length=CONTEXT_LADDER['P1'], batch_size=4,
                  description="vocabulary expansion: only modality rows train"),
        StageSpec(name='P2', mixture={'text': 2.0, 'image': 6.5, 'audio': 1.5},
                  mask_factors=MaskFactors(vision=0.5),
                  token_budget=p2_budget, context_length=CONTEXT_LADDER['P2'], batch_size=4, requires='P1',
                  triggers=[Trigger(max(restore_at, 0), Mutation('mask.vision', 1.0))],
                  description="full-parameter pre-training, vision loss restored mid-run"),
        StageSpec(name='P3', mixture={'text': 2.0, 'image': 6.5, 'audio': 1.5},
                  token_budget=b('P3'), context_length=CONTEXT_LADDER['P3'], batch_size=2, requires='P2',
                  description="long-context pre-training, reduced batch"),
        StageSpec(name='E1', mixture={'caption': 0.75, 'ocr': 0.20, 'vqa': 0.05},
                  freeze_policy=FreezePolicy.ADAPTER_ONLY, adapter_group='vision_adapter',
                  token_budget=b('E1'), context_length=SFT_CONTEXT, batch_size=2, requires='P3',
                  description="vision adapter alignment"),
        StageSpec(name='E2', mixture={'text': 0.121, 'vision_understanding': 0.385,
                                      'vision_generation': 0.344, 'audio': 0.150},
                  token_budget=b('E2'), context_length=SFT_CONTEXT, batch_size=2, requires='E1',
                  vision_encoder_trainable=True,
                  description="full-parameter alignment with the vision encoder unfrozen"),
        StageSpec(name='E3', mixture={'asr': 1.0},
                  freeze_policy=FreezePolicy.ADAPTER_ONLY, adapter_group='audio_adapter',
                  token_budget=b('E3'), context_length=SFT_CONTEXT, batch_size=2, requires='E2',
                  description="audio adapter alignment on speech recognition"),
        StageSpec(name='S1', mixture={'chat': 0.502, **_even(sft_rest_s1, 0.498)},
                  token_budget=b('S1'), context_length=SFT_CONTEXT, batch_size=2, requires='E3',
                  vision_encoder_trainable=True, target_roles=ASSISTANT_ONLY,
                  description="SFT: general chat plus core any-to-any tasks"),
        StageSpec(name='S2', mixture={'chat': 0.083, **_even(sft_rest_s2, 0.917)},
                  token_budget=b('S2'), context_length=SFT_CONTEXT, batch_size=2, requires='S1',
                  vision_encoder_trainable=True, target_roles=ASSISTANT_ONLY,
                  description="SFT: modality-heavy mixture"),
        StageSpec(name='S3a', mixture={'video': 1.0},
                  freeze_policy=FreezePolicy.ADAPTER_ONLY, adapter_group='compressor',
                  token_budget=b('S3a'), context_length=SFT_CONTEXT, batch_size=2, requires='S2',
                  target_roles=ASSISTANT_ONLY,
                  description="compressor-only warm-up before video SFT"),
        StageSpec(name='S3', mixture={'video': 0.413, **_even(sft_rest_s3, 0.587)},
                  token_budget=b('S3'), context_length=SFT_CONTEXT, batch_size=2, requires='S3a',
                  vision_encoder_trainable=True, target_roles=ASSISTANT_ONLY,
                  description="SFT: video understanding"),
        StageSpec(name='S4', mixture=_even(('chat', 'think_vqa', 'think_edit', 'think_av'), 1.0),
                  token_budget=b('S4'), context_length=SFT_CONTEXT, batch_size=2, requires='S3',
                  vision_encoder_trainable=True, target_roles=ASSISTANT_ONLY,
                  description="SFT: think-block intent parsing"),
    ]
    if with_text_pretrain:
        stages[0].requires = 'T3'
        stages = text_ladder + stages
    check_batch_tokens(stages)
    return stages


def check_batch_tokens(stages: Sequence[StageSpec]) -> None:
    """Longer contexts trade batch size: no stage may exceed the first stage's tokens per batch"""
    if not stages:
        return
    limit = stages[0].batch_size * stages[0].context_length
    for stage in stages[1:]:
        if stage.batch_size * stage.context_length > limit:
            raise StageError(f"stage {stage.name}: {stage.batch_size} x {stage.context_length} tokens per batch "
                             f"exceeds {limit} set by {stages[0].name}")


def all_stages(budget_scale: float = 1e-6) -> Dict[str, StageSpec]:
    """Every built-in stage by name, including the text ladder"""
    return {s.name: s for s in builtin_stages(budget_scale, with_text_pretrain=True)}


def stage_by_name(name: str, stages: Optional[Sequence[StageSpec]] = None,
                  budget_scale: float = 1e-6) -> StageSpec:
    pool = {s.name: s for s in stages} if stages is not None else all_stages(budget_scale)
    if name not in pool:
        raise StageError(f"unknown stage {name!r}; known: {', '.join(pool)}")
    return pool[name]


def context_for(stage: Union[StageSpec, str]) -> int:
    """Context length of a stage (accepts a spec or a built-in name)"""
    if isinstance(stage, StageSpec):
        return stage.context_length
    if stage in CONTEXT_LADDER:
        return CONTEXT_LADDER[stage]
    if stage in STAGE_ORDER:
        return SFT_CONTEXT
    raise StageError(f"unknown stage {stage!r}")


def stages_to_json(stages: Sequence[StageSpec], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump({'stages': [s.to_dict() for s in stages]}, f, indent=2, sort_keys=True)
    return path


def stages_from_json(path: Path) -> List[StageSpec]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise StageError(f"cannot read stage file {path}: {e}") from e
    stages = [StageSpec.from_dict(item) for item in data.get('stages', [])]
    check_batch_tokens(stages)
    return stages


# ---------------------------------------------------------------------------
# Ledger and live state
# ---------------------------------------------------------------------------

@dataclass
class MixtureLedger:
    """Consumed tokens and draws per mixture key"""
    tokens: Dict[str, int] = field(default_factory=dict)
    draws: Dict[str, int] = field(default_factory=dict)
    total: int = 0

    def add(self, key: str, token_count: int) -> None:
        if token_count < 0:
            raise StageError(f"negative token count {token_count} for {key}")
        self.tokens[key] = self.tokens.get(key, 0) + int(token_count)
        self.draws[key] = self.draws.get(key, 0) + 1
        self.total += int(token_count)
        if sum(self.tokens.values()) != self.total:
            raise AssertionError("ledger counters no longer sum to the total")

    def fractions(self, by: str = 'draws') -> Dict[str, float]:
        counts = self.draws if by == 'draws' else self.tokens
        n = sum(counts.values())
        return {k: v / n for k, v in counts.items()} if n else {}

    def to_dict(self) -> Dict[str, Any]:
        return {'tokens': dict(self.tokens), 'draws': dict(self.draws), 'total': self.total}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'MixtureLedger':
        ledger = cls(tokens={k: int(v) for k, v in data.get('tokens', {}).items()},
                     draws={k: int(v) for k, v in data.get('draws', {}).items()},
                     total=int(data.get('total', 0)))
        if sum(ledger.tokens.values()) != ledger.total:
            raise StageError("ledger file is inconsistent: counters do not sum to total")
        return ledger

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: Path) -> 'MixtureLedger':
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))


@dataclass
class StageRuntime:
    """Mutable state of a running stage: live mask factors, lr scale, fired triggers"""
    stage: StageSpec
    factors: MaskFactors = None
    lr_scale: float = 1.0
    fired: List[int] = field(default_factory=list)
    last_total: int = 0

    def __post_init__(self):
        if self.factors is None:
            self.factors = self.stage.mask_factors

    def fire(self, index: int) -> Mutation:
        if index in self.fired:
            raise AssertionError(f"trigger {index} of stage {self.stage.name} already fired")
        mutation = self.stage.triggers[index].mutation
        if mutation.field == 'lr_scale':
            self.lr_scale = float(mutation.value)
        else:
            modality = mutation.field.split('.', 1)[1]
            self.factors = self.factors.replace(**{modality: float(mutation.value)})
        self.fired.append(index)
        return mutation


def advance(ledger: MixtureLedger, runtime: StageRuntime) -> List[Mutation]:
    """
    Fire every trigger whose threshold the ledger total has reached

    Triggers fire in threshold order, each at most once; one large step
    can fire several.
    """
    if ledger.total < runtime.last_total:
        raise AssertionError(f"ledger went backwards: {runtime.last_total} -> {ledger.total}")
    runtime.last_total = ledger.total
    fired = []
    for index, trigger in enumerate(runtime.stage.triggers):
        if index in runtime.fired or ledger.total < trigger.token_count:
            continue
        mutation = runtime.fire(index)
        logger.info(f"✓ stage {runtime.stage.name}: trigger at {trigger.token_count} tokens "
                    f"set {mutation.field} = {mutation.value}")
        fired.append(mutation)
    return fired


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def draw_keys(stage: StageSpec, n: int, rng: np.random.Generator) -> List[str]:
    """n mixture keys drawn with probability proportional to their weights"""
    keys = list(stage.mixture)
    probs = np.array([stage.mixture[k] for k in keys], dtype=np.float64)
    probs /= probs.sum()
    picks = rng.choice(len(keys), size=n, p=probs)
    return [keys[i] for i in picks]


@dataclass
class SampledBatch:
    inputs: List[ModelInput]
    keys: List[str]

    @property
    def token_count(self) -> int:
        return sum(len(x) for x in self.inputs)


def sample_batch(
    stage: StageSpec,
    registry,
    rng: np.random.Generator,
    runtime: Optional[StageRuntime] = None,
    ledger: Optional[MixtureLedger] = None,
    batch_size: Optional[int] = None
) -> SampledBatch:
    """
    Draw one batch of assembled samples for a stage

    Args:
        stage: Stage spec
        registry: Corpus registry exposing ``has(key)`` and
            ``sample(key, factors, target_roles, max_length)``
        rng: Seeded generator; the batch sequence is a function of its state
        runtime: Live stage state (mask factors after triggers)
        ledger: Updated with the realized token count of every item
        batch_size: Overrides the stage batch size

    Returns:
        SampledBatch
    """
    missing = [k for k in stage.mixture if not registry.has(k)]
    if missing:
        raise StageError(f"stage {stage.name}: no corpus for mixture key(s) {missing}")
    factors = runtime.factors if runtime is not None else stage.mask_factors
    keys = draw_keys(stage, batch_size or stage.batch_size, rng)
    inputs = []
    for key in keys:
        item = registry.sample(key, factors=factors, target_roles=stage.supervised_roles,
                               max_length=stage.context_length)
        inputs.append(item)
        if ledger is not None:
            ledger.add(key, len(item))
    return SampledBatch(inputs=inputs, keys=keys)


def concentration_bound(p: float, n: int, sigmas: float = 3.0) -> float:
    """Allowed deviation of a realized fraction from its target p after n draws"""
    return sigmas * math.sqrt(p * (1.0 - p) / n)


# ---------------------------------------------------------------------------
# Freeze handoff
# ---------------------------------------------------------------------------

def stage_freeze_mask(
    stage: StageSpec,
    layout: VocabLayout,
    registry: Mapping[str, Mapping[str, torch.nn.Parameter]]
) -> FreezeMask:
    """Stage policy combined with the groups no stage (or this stage) trains"""
    mask = expansion_freeze_mask(layout, stage.freeze_policy, registry, stage.adapter_group)
    always = FreezeMask()
    groups = list(ALWAYS_FROZEN_GROUPS)
    if not stage.vision_encoder_trainable:
        groups.append(VISION_ENCODER_GROUP)
    for group in groups:
        for name in registry.get(group, {}):
            always.frozen[name] = True
    return mask.union(always)


class FreezeController:
    """
    Owns the live freeze mask of a training run

    Installing a mask bumps its version; an optimizer step must present the
    version it was prepared under, so no step runs against a stale mask.
    """

    def __init__(self, params: Mapping[str, torch.nn.Parameter]):
        self.params = dict(params)
        self.mask = FreezeMask()
        self.version = 0

    def install(self, mask: FreezeMask) -> int:
        self.version += 1
        mask.version = self.version
        mask.apply_requires_grad(self.params)
        self.mask = mask
        logger.info(f"✓ freeze mask v{self.version}: "
                    f"{self.mask.frozen_entry_count(self.params):,} frozen entries")
        return self.version

    def step(self, optimizer: torch.optim.Optimizer, version: int) -> None:
        if version != self.mask.version:
            raise AssertionError(f"optimizer step prepared under mask v{version}, live mask is v{self.mask.version}")
        snapshot = self.mask.snapshot(self.params)
        self.mask.zero_frozen_grads(self.params)
        optimizer.step()
        self.mask.restore(self.params, snapshot)
