"""
Generation Service - prompt -> backbone -> decoders -> files

A prompt file is either plain text (a single user turn, task ``chat``) or
JSON:

    {
      "task": "t2i",
      "turns": [{"role": "user", "content": [{"text": "Draw a red circle."},
                                             {"image": "cat.png"},
                                             {"audio": "question.wav"}]}],
      "audio_seconds": 2.0,
      "speaker_ref": "voice.wav",
      "original_size": [928, 624]
    }

Relative media paths resolve against the prompt file's directory.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import torch

import prompts
from config import RunConfig, UsageError, CheckpointError
from interleave_service import Role, Segment, SegmentKind, Turn, assemble, generation_prefix, render_template, text_segment
from modality_vocab import ByteTokenizer, Region, VocabLayout, resolve
from models.backbone import VISION_SPAN_LENGTH, SamplerState, generate
from models.encoders import TokenBudget, audio_embedding_count, vision_embedding_count
from models.vision_tokenizer import ImageBuffer
from stage_orchestrator import STAGE_ORDER, TEXT_PRETRAIN_ORDER, context_for
from training_service import Components, OmniModel, TrainingService
from utils.media_utils import load_png, load_wav, save_png, save_wav, write_u16_stream
from utils.path_utils import checkpoint_dir

logger = logging.getLogger(__name__)

OUTPUT_MODALITIES = ('text', 'image', 'audio')
DEFAULT_AUDIO_SECONDS = 2.0


@dataclass
class PromptSpec:
    task: str = 'chat'
    turns: List[Dict[str, Any]] = field(default_factory=list)
    audio_seconds: float = DEFAULT_AUDIO_SECONDS
    speaker_ref: Optional[str] = None
    original_size: Optional[Tuple[int, int]] = None
    base_dir: Path = Path('.')

    def media_path(self, name: str) -> Path:
        path = Path(name)
        return path if path.is_absolute() else self.base_dir / path


def load_prompt(path: Path) -> PromptSpec:
    """Parse a prompt file; anything that is not JSON is a plain text user turn"""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"prompt file not found: {path}")
    raw = path.read_text(encoding='utf-8')
    try:
        data = json.loads(raw)
    except json.JSONDecodeError:
        data = None
    if not isinstance(data, dict):
        return PromptSpec(task='chat', turns=[{'role': 'user', 'content': [{'text': raw.strip()}]}],
                          base_dir=path.parent)
    if not data.get('turns'):
        raise UsageError(f"prompt {path} has no turns")
    size = data.get('original_size')
    return PromptSpec(
        task=data.get('task', 'chat'),
        turns=list(data['turns']),
        audio_seconds=float(data.get('audio_seconds', DEFAULT_AUDIO_SECONDS)),
        speaker_ref=data.get('speaker_ref'),
        original_size=tuple(size) if size else None,
        base_dir=path.parent,
    )


def strip_think(tokens: Sequence[int], layout: VocabLayout) -> List[int]:
    """Drop every think-open .. think-close run (both delimiters included)"""
    open_id = int(layout.special(prompts.THINK_OPEN))
    close_id = int(layout.special(prompts.THINK_CLOSE))
    kept, inside = [], False
    for token in tokens:
        if not inside and token == open_id:
            inside = True
        elif inside:
            if token == close_id:
                inside = False
        else:
            kept.append(int(token))
    return kept


def render_text(tokens: Sequence[int], layout: VocabLayout, tokenizer: ByteTokenizer) -> str:
    """Text ids decoded, control tokens by name, modality ids summarized"""
    pieces: List[str] = []
    text_run: List[int] = []
    media = {Region.VISION: 0, Region.AUDIO: 0}

    def flush():
        if text_run:
            pieces.append(tokenizer.decode(text_run))
            text_run.clear()

    for token in tokens:
        region, local = resolve(layout, int(token))
        if region is Region.TEXT:
            text_run.append(local)
            continue
        flush()
        if region is Region.SPECIALS:
            name = layout.special_tokens[local]
            if name == prompts.VISION_END:
                pieces.append(f"[{media[Region.VISION]} vision ids]")
                media[Region.VISION] = 0
            elif name == prompts.AUDIO_END:
                pieces.append(f"[{media[Region.AUDIO]} audio ids]")
                media[Region.AUDIO] = 0
            pieces.append(name)
        else:
            media[region] += 1
    flush()
    return ''.join(pieces)


def latest_stage(root: Path) -> str:
    """Last stage in run order that has a checkpoint"""
    for name in reversed(TEXT_PRETRAIN_ORDER + STAGE_ORDER):
        if (checkpoint_dir(root, name) / 'manifest.json').is_file():
            if name in TEXT_PRETRAIN_ORDER and any(
                    (checkpoint_dir(root, s) / 'manifest.json').is_file() for s in STAGE_ORDER):
                continue
            return name
    raise CheckpointError(f"no trained stage under {root}; run `omnistack train` first")


@dataclass
class GenerationOutput:
    tokens: List[int]
    text: str
    images: List[Path] = field(default_factory=list)
    audio: List[Path] = field(default_factory=list)
    codes: List[Path] = field(default_factory=list)
    stopped: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            'tokens': len(self.tokens),
            'text': self.text,
            'images': [str(p) for p in self.images],
            'audio': [str(p) for p in self.audio],
            'codes': [str(p) for p in self.codes],
            'stopped': self.stopped,
        }


class GenerationService:
    """
    Any-to-any generation against a trained run

    Attributes:
        cfg: Run configuration
        root: Run output root
        stage: Checkpoint the backbone is loaded from
    """

    def __init__(self, cfg: RunConfig, root: Path, stage: Optional[str] = None,
                 training: Optional[TrainingService] = None):
        self.cfg = cfg
        self.root = Path(root)
        self.training = training or TrainingService(cfg, self.root)
        self.layout = self.training.layout
        self.tokenizer = self.training.tokenizer
        self.stage = stage or latest_stage(self.root)
        self.budget = TokenBudget.from_config(cfg.encoders)
        self._model: Optional[OmniModel] = None

    @property
    def components(self) -> Components:
        return self.training.components()

    @property
    def model(self) -> OmniModel:
        if self._model is None:
            self._model = self.training.load_model(self.stage)
            self._model.backbone.context_limit = context_for(self.stage)
            logger.info(f"✓ Loaded backbone from stage {self.stage}")
        return self._model

    # -- prompt -----------------------------------------------------------

    def content_segments(self, spec: PromptSpec, content: Sequence[Dict[str, Any]], role: Role) -> List[Segment]:
        segments: List[Segment] = []
        for part in content:
            if 'text' in part:
                segments.append(text_segment(self.tokenizer, part['text'], role))
            elif 'image' in part:
                pixels = load_png(spec.media_path(part['image']))
                length = vision_embedding_count([tuple(pixels.shape[1:])], self.cfg.encoders, self.budget.image_budget)
                edit = spec.task == 'edit'
                segments.append(Segment(kind=SegmentKind.VISION_CONTINUOUS, role=role, length=length,
                                        source={'frames': [pixels], 'video': False}, edit_pair=edit))
                if edit:
                    grid = self.components.vision_tokenizer.tokenize_any(ImageBuffer(pixels=pixels))
                    segments.append(Segment(kind=SegmentKind.VISION_DISCRETE, role=role, ids=grid.flat()))
                if spec.original_size is None:
                    spec.original_size = (int(pixels.shape[2]), int(pixels.shape[1]))
            elif 'audio' in part:
                wave = load_wav(spec.media_path(part['audio']), self.cfg.encoders.sample_rate)
                length = audio_embedding_count(int(wave.shape[0]), self.cfg.encoders)
                segments.append(Segment(kind=SegmentKind.AUDIO_CONTINUOUS, role=role, length=length,
                                        source={'waveform': wave}))
                codes = self.components.audio_tokenizer.tokenize(wave)
                segments.append(Segment(kind=SegmentKind.AUDIO_DISCRETE, role=role, ids=[int(c) for c in codes]))
            else:
                raise UsageError(f"unknown content part {sorted(part)}")
        return segments

    def build_prompt(self, spec: PromptSpec, modality_out: str):
        """
        Render the conversation and open the assistant reply

        Returns:
            ModelInput of the prompt (its last span left open)
        """
        if modality_out not in OUTPUT_MODALITIES:
            raise UsageError(f"--modality-out must be one of {OUTPUT_MODALITIES}")
        if spec.task not in prompts.TASK_OUTPUTS:
            raise UsageError(f"unknown task {spec.task!r}; known: {sorted(prompts.TASK_OUTPUTS)}")
        if not prompts.supports_output(spec.task, modality_out):
            raise UsageError(f"task {spec.task!r} produces {prompts.TASK_OUTPUTS[spec.task]}, not {modality_out}")
        turns = [Turn(role=t.get('role', 'user'), segments=self.content_segments(spec, t.get('content', []),
                                                                                 Role(t.get('role', 'user'))))
                 for t in spec.turns]
        if turns and turns[-1].role is Role.ASSISTANT:
            raise UsageError("the prompt must end with a user turn")
        segments = render_template(turns, self.layout, self.tokenizer)
        segments.append(generation_prefix(self.layout, modality_out))
        return assemble(segments, self.layout, close_last_span=False)

    # -- run --------------------------------------------------------------

    def generate(
        self,
        spec: PromptSpec,
        modality_out: str = 'text',
        out_dir: Optional[Path] = None,
        seed: Optional[int] = None,
        temperature: Optional[float] = None,
        top_k: Optional[int] = None,
        guidance_scale: Optional[float] = None,
        steps: Optional[int] = None,
        strip_think_block: bool = False,
    ) -> GenerationOutput:
        """
        Generate one reply and write its media

        Args:
            spec: Parsed prompt
            modality_out: text, image or audio
            out_dir: Where PNG / WAV / text files go (defaults to <root>/generations)
            seed: Sampling seed (defaults to the run seed)
            temperature, top_k: Sampler overrides
            guidance_scale: Autoguidance scale override for images
            steps: Decoder sampling steps override
            strip_think_block: Remove the think span from the returned text

        Returns:
            GenerationOutput
        """
        item = self.build_prompt(spec, modality_out)
        seed = self.cfg.seed if seed is None else seed
        out_dir = Path(out_dir) if out_dir else self.root / 'generations'
        out_dir.mkdir(parents=True, exist_ok=True)

        audio_target = None
        if modality_out == 'audio':
            audio_target = int(round(spec.audio_seconds * self.cfg.vocoder.token_rate))
            if audio_target < 1:
                raise UsageError(f"audio request of {spec.audio_seconds}s gives no codes")
        state = SamplerState.from_config(self.cfg.sampler, audio_target=audio_target)
        if temperature is not None:
            state.temperature = temperature
        if top_k is not None:
            state.top_k = top_k
        if modality_out == 'image':
            max_new = VISION_SPAN_LENGTH + 1
        elif modality_out == 'audio':
            max_new = audio_target + 1
        else:
            max_new = self.cfg.sampler.max_new

        model = self.model
        with torch.no_grad():
            values = item.inject_values(self.cfg.backbone.hidden, model.resolve) if item.slot_spans else None
        comps = self.components
        speaker = None
        if spec.speaker_ref:
            vocoder = comps.vocoder()
            speaker = vocoder.speaker_embed(load_wav(spec.media_path(spec.speaker_ref), self.cfg.vocoder.sample_rate))
        original = spec.original_size or (self.cfg.vision_decoder.output_size, self.cfg.vision_decoder.output_size)
        result = generate(
            model.backbone, self.layout, item.input_ids, state, max_new, seed=seed,
            inject_values=values, inject_mask=item.slot_mask if values is not None else None,
            decoders={'image': comps.vision_decoder(), 'audio': comps.vocoder()},
            decoder_context={
                'image': {'original_size': original, 'steps': steps, 'guidance_scale': guidance_scale},
                'audio': {'speaker': speaker},
            },
        )

        # the prompt opened the requested span; re-attach its opener for rendering
        tokens = list(result.tokens)
        opener = {'image': prompts.VISION_START, 'audio': prompts.AUDIO_START}.get(modality_out)
        shown = ([int(self.layout.special(opener))] if opener else []) + tokens
        if strip_think_block:
            shown = strip_think(shown, self.layout)
        output = GenerationOutput(tokens=tokens, text=render_text(shown, self.layout, self.tokenizer),
                                  stopped=result.stopped)

        for index, (modality, signal) in enumerate(result.decoded):
            if modality == 'image':
                output.images.append(save_png(signal, out_dir / f"image_{index}.png"))
            else:
                output.audio.append(save_wav(signal, out_dir / f"audio_{index}.wav", self.cfg.vocoder.sample_rate))
        # audio codes as u16-LE streams
        for index, span in enumerate(s for s in result.spans if s.modality == 'audio'):
            output.codes.append(write_u16_stream(span.local_ids, out_dir / f"audio_{index}.codes"))
        (out_dir / 'reply.txt').write_text(output.text, encoding='utf-8')
        logger.info(f"✓ Generated {len(tokens)} tokens, {len(output.images)} image(s), {len(output.audio)} audio file(s)")
        return output
