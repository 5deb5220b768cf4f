"""
Training Service - component pre-training and the staged backbone runs

Components (trained once, frozen afterwards):
    vision_tokenizer   VQ tokenizer (reconstruction + commitment, EMA codebook)
    audio_encoder      frozen speech encoder shared by both audio paths
    fsq                FSQ projections over the audio encoder features
    decoder_main       channel-concat DiT, four-phase curriculum
    decoder_bad        the small, briefly trained autoguidance reference
    vocoder            unit generator (STFT + L1 reconstruction)
    speaker_encoder    mel-statistics speaker embedding

Stages run the backbone bundle (backbone, vision encoder + adapter, audio
adapter, compressor) through sample -> collate -> loss -> masked step ->
trigger checks, and write one checkpoint per stage.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from config import CheckpointError, LossError, MtpConfig, RunConfig, ShapeError, get_config
from corpus_service import Corpus, CorpusRegistry
from interleave_service import SegmentKind, SlotSpan, collate
from modality_vocab import ByteTokenizer, VocabLayout, layout_from_config
from models.backbone import OmniBackbone, backbone_loss
from models.encoders import (
    AudioAdapter, AudioEncoder, AudioTokenizer, TemporalCompressor, TokenBudget, VisionEncoder,
    encode_audio, encode_image, log_mel,
)
from models.vision_decoder import VisionDecoder, build_decoder, prepare_examples, train_decoder
from models.vision_tokenizer import VisionTokenizer, train_vq_step
from models.vocoder import SpeakerEncoder, UnitGenerator, UnitVocoder, train_vocoder
from stage_orchestrator import (
    FreezeController, MixtureLedger, StageRuntime, StageSpec,
    advance, sample_batch, stage_freeze_mask,
)
from utils.checkpoint import load_into, save_weights
from utils.media_utils import resize_pixels
from utils.path_utils import checkpoint_dir, corpus_dir, require_checkpoint

logger = logging.getLogger(__name__)

COMPONENTS_DIRNAME = 'components'
COMPONENT_NAMES = ('vision_tokenizer', 'audio_encoder', 'fsq', 'decoder_main', 'decoder_bad',
                   'vocoder', 'speaker_encoder')


# ---------------------------------------------------------------------------
# Components
# ---------------------------------------------------------------------------

@dataclass
class Components:
    vision_tokenizer: VisionTokenizer
    audio_encoder: AudioEncoder
    audio_tokenizer: AudioTokenizer
    decoder_main: nn.Module
    decoder_bad: nn.Module
    generator: UnitGenerator
    speaker_encoder: SpeakerEncoder
    cfg: RunConfig = None

    def modules(self) -> Dict[str, nn.Module]:
        return {
            'vision_tokenizer': self.vision_tokenizer,
            'audio_encoder': self.audio_encoder,
            'fsq': self.audio_tokenizer.fsq,
            'decoder_main': self.decoder_main,
            'decoder_bad': self.decoder_bad,
            'vocoder': self.generator,
            'speaker_encoder': self.speaker_encoder,
        }

    def freeze(self) -> 'Components':
        for module in self.modules().values():
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
        self.vision_tokenizer.frozen = True
        return self

    def vision_decoder(self) -> VisionDecoder:
        return VisionDecoder(self.vision_tokenizer, self.decoder_main, self.cfg.vision_decoder, bad=self.decoder_bad)

    def vocoder(self, default_speaker: Optional[torch.Tensor] = None) -> UnitVocoder:
        return UnitVocoder(self.generator, self.speaker_encoder, default_speaker=default_speaker)


def build_components(cfg: RunConfig) -> Components:
    """Freshly initialized components; initialization is seeded by cfg.seed"""
    torch.manual_seed(cfg.seed)
    audio_encoder = AudioEncoder(cfg.encoders)
    cond_channels = cfg.vision_tokenizer.feature_dim
    return Components(
        vision_tokenizer=VisionTokenizer(cfg.vision_tokenizer),
        audio_encoder=audio_encoder,
        audio_tokenizer=AudioTokenizer(audio_encoder, cfg.fsq),
        decoder_main=build_decoder(cfg.vision_decoder, cond_channels),
        decoder_bad=build_decoder(cfg.vision_decoder, cond_channels, bad=True),
        generator=UnitGenerator(cfg.vocoder, cfg.fsq.codebook_size),
        speaker_encoder=SpeakerEncoder(cfg.vocoder),
        cfg=cfg,
    )


def train_components(cfg: RunConfig, corpus: Corpus, seed: Optional[int] = None,
                     metrics_path: Optional[Path] = None) -> Components:
    """
    Train every frozen component on the corpus

    Order matters: the decoder learns from the trained tokenizer's features
    and the vocoder from the trained FSQ codes.
    """
    seed = cfg.seed if seed is None else seed
    comps = build_components(cfg)
    rng = np.random.default_rng(seed)
    size = cfg.vision_tokenizer.image_size
    summary: Dict[str, Any] = {}

    logger.info("Training vision tokenizer...")
    squares = torch.stack([resize_pixels(corpus.pixels(i), (size, size)) for i in range(len(corpus.images))])
    optimizer = torch.optim.Adam(comps.vision_tokenizer.parameters(), lr=cfg.vision_tokenizer.lr)
    vq_losses = []
    for _ in tqdm(range(cfg.vision_tokenizer.steps), desc='vision tokenizer', disable=None):
        picks = rng.choice(len(squares), size=min(8, len(squares)), replace=False)
        vq_losses.append(train_vq_step(comps.vision_tokenizer, optimizer, squares[picks]))
    comps.vision_tokenizer.frozen = True
    summary['vision_tokenizer'] = vq_losses
    logger.info(f"  ✓ vision tokenizer: {len(vq_losses)} steps")

    logger.info("Fitting FSQ projections...")
    fsq = comps.audio_tokenizer.fsq
    comps.audio_encoder.requires_grad_(False)
    optimizer = torch.optim.Adam(fsq.parameters(), lr=1e-3)
    waves = [corpus.wave(c.file) for c in corpus.clips]
    fsq_losses = []
    for step in range(cfg.fsq.steps):
        loss = comps.audio_tokenizer.reconstruction_loss(waves[step % len(waves)])
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        fsq_losses.append(float(loss.detach()))
    summary['fsq'] = fsq_losses
    logger.info(f"  ✓ FSQ projections: {len(fsq_losses)} steps")

    logger.info("Training vision decoder (main + guidance reference)...")
    examples = prepare_examples(comps.vision_tokenizer, [corpus.pixels(i) for i in range(len(corpus.images))])
    dcfg = cfg.vision_decoder
    summary['decoder_main'] = train_decoder(comps.decoder_main, examples, dcfg.steps, dcfg.lr, seed=seed, desc='decoder')
    bad_steps = max(1, int(round(dcfg.steps * dcfg.bad_step_fraction)))
    summary['decoder_bad'] = train_decoder(comps.decoder_bad, examples, bad_steps, dcfg.lr, seed=seed + 1, desc='decoder_bad')

    logger.info("Training vocoder...")
    clips = []
    for wave in waves:
        codes = comps.audio_tokenizer.tokenize(wave)
        with torch.no_grad():
            speaker = comps.speaker_encoder(wave)
        clips.append((codes, wave, speaker))
    summary['vocoder'] = train_vocoder(comps.generator, clips, cfg.vocoder.steps, cfg.vocoder.lr, seed=seed)

    if metrics_path is not None:
        append_metrics(metrics_path, {
            'stage': 'components',
            **{name: {'first': losses[0], 'last': losses[-1], 'steps': len(losses)}
               for name, losses in summary.items() if losses},
        })
    return comps.freeze()


def save_components(comps: Components, root: Path) -> Path:
    base = checkpoint_dir(root, COMPONENTS_DIRNAME)
    for name, module in comps.modules().items():
        save_weights(module.state_dict(), base / name)
    logger.info(f"✓ Saved {len(COMPONENT_NAMES)} components to {base}")
    return base


def load_components(cfg: RunConfig, root: Path) -> Components:
    base = checkpoint_dir(root, COMPONENTS_DIRNAME)
    comps = build_components(cfg)
    for name, module in comps.modules().items():
        if not (base / name / 'manifest.json').is_file():
            raise CheckpointError(f"missing component checkpoint '{name}' under {base}; run train first")
        load_into(module, base / name)
    return comps.freeze()


def components_exist(root: Path) -> bool:
    base = checkpoint_dir(root, COMPONENTS_DIRNAME)
    return all((base / name / 'manifest.json').is_file() for name in COMPONENT_NAMES)


# ---------------------------------------------------------------------------
# Backbone bundle
# ---------------------------------------------------------------------------

class OmniModel(nn.Module):
    """Backbone plus the trainable understanding path"""

    def __init__(self, cfg: RunConfig, layout: VocabLayout):
        super().__init__()
        self.cfg = cfg
        self.layout = layout
        hidden = cfg.backbone.hidden
        self.backbone = OmniBackbone(cfg.backbone, layout.total, cfg.mtp)
        self.vision_encoder = VisionEncoder(cfg.encoders, hidden)
        self.audio_encoder = AudioEncoder(cfg.encoders)
        self.audio_adapter = AudioAdapter(cfg.encoders.audio_width, hidden, cfg.encoders.adapter_hidden_mult)
        self.compressor = TemporalCompressor(hidden, cfg.encoders.compress_window)
        self.budget = TokenBudget.from_config(cfg.encoders)

    def parameter_groups(self) -> Dict[str, Dict[str, nn.Parameter]]:
        """Freeze-mask registry: group -> {qualified parameter name -> parameter}"""
        groups = self.backbone.parameter_groups(prefix='backbone.')
        groups['vision_encoder'] = {}
        groups['vision_adapter'] = {}
        for name, param in self.vision_encoder.named_parameters():
            group = 'vision_adapter' if name.startswith('adapter.') else 'vision_encoder'
            groups[group]['vision_encoder.' + name] = param
        for module_name in ('audio_encoder', 'audio_adapter', 'compressor'):
            module = getattr(self, module_name)
            groups[module_name] = {f"{module_name}.{n}": p for n, p in module.named_parameters()}
        return groups

    def named_params(self) -> Dict[str, nn.Parameter]:
        return dict(self.named_parameters())

    def resolve(self, span: SlotSpan) -> torch.Tensor:
        """Embeddings for one continuous slot span"""
        device = self.backbone.embedding.weight.device
        source = span.source or {}
        if span.kind is SegmentKind.VISION_CONTINUOUS:
            frames = [f.to(device) for f in source['frames']]
            values = encode_image(self.vision_encoder, frames, self.budget, video=bool(source.get('video'))).values
        elif span.kind is SegmentKind.AUDIO_CONTINUOUS:
            mel = log_mel(source['waveform'].to(device), self.cfg.encoders)
            with torch.no_grad():
                embedding = encode_audio(self.audio_encoder, mel)
            embedding = self.audio_adapter.adapt(embedding)
            if span.compressed:
                embedding = self.compressor.compress(embedding)
            values = embedding.values
        else:
            raise ShapeError(f"span kind {span.kind} is not continuous")
        if values.shape[0] != span.length:
            raise ShapeError(f"{span.kind.value} span at {span.start}: {values.shape[0]} embeddings, "
                             f"{span.length} slots")
        return values


# ---------------------------------------------------------------------------
# Stage runs
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    name: str
    steps: int
    tokens: int
    final_loss: float
    losses: List[float] = field(default_factory=list)
    fired: List[Dict[str, Any]] = field(default_factory=list)
    ledger: Dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def append_metrics(path: Path, record: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(record, sort_keys=True) + '\n')


class TrainingService:
    """
    Runs stages against one run directory

    Attributes:
        cfg: Run configuration
        root: Run output root (config.json, corpus/, checkpoints/)
    """

    def __init__(self, cfg: RunConfig, root: Path, corpus: Optional[Corpus] = None):
        self.cfg = cfg
        self.root = Path(root)
        self.config = get_config()
        self.layout = layout_from_config(cfg.vocab)
        self.corpus = corpus or Corpus(corpus_dir(self.root), cfg.encoders.sample_rate)
        self.tokenizer: ByteTokenizer = self.corpus.tokenizer()
        self.metrics_path = self.root / self.config.METRICS_FILENAME
        self.device = torch.device(self.config.DEVICE)
        self._components: Optional[Components] = None

    # -- components -------------------------------------------------------

    def components(self) -> Components:
        """Load trained components, training and saving them on first use"""
        if self._components is None:
            if components_exist(self.root):
                self._components = load_components(self.cfg, self.root)
                logger.info("✓ Loaded trained components")
            else:
                logger.info("=" * 60)
                logger.info("Training components")
                logger.info("=" * 60)
                self._components = train_components(self.cfg, self.corpus, metrics_path=self.metrics_path)
                save_components(self._components, self.root)
        return self._components

    def registry(self, cycle: bool = True) -> CorpusRegistry:
        comps = self.components()
        return CorpusRegistry(self.corpus, self.layout, self.tokenizer,
                              vision_tokenizer=comps.vision_tokenizer,
                              audio_tokenizer=comps.audio_tokenizer,
                              encoder_cfg=self.cfg.encoders, cycle=cycle, seed=self.cfg.seed)

    # -- model ------------------------------------------------------------

    def build_model(self, stage: StageSpec) -> OmniModel:
        """Fresh model, or the predecessor stage's weights when the stage has one"""
        torch.manual_seed(self.cfg.seed)
        model = OmniModel(self.cfg, self.layout)
        model.audio_encoder.load_state_dict(self.components().audio_encoder.state_dict())
        if stage.requires:
            load_into(model, require_checkpoint(self.root, stage.requires))
            logger.info(f"✓ Stage {stage.name} starts from the {stage.requires} checkpoint")
        return model.to(self.device)

    def load_model(self, stage_name: str) -> OmniModel:
        model = OmniModel(self.cfg, self.layout)
        load_into(model, require_checkpoint(self.root, stage_name))
        model.eval()
        return model.to(self.device)

    # -- stage loop -------------------------------------------------------

    def run_stage(self, stage: StageSpec, max_steps: Optional[int] = None,
                  stage_index: int = 0, model: Optional[OmniModel] = None) -> StageResult:
        """
        Train one stage to its token budget (or max_steps) and checkpoint it

        Args:
            stage: Stage spec
            max_steps: Optional cap on optimizer steps
            stage_index: Position in the run, mixed into the data seed
            model: Start from this model instead of the predecessor checkpoint

        Returns:
            StageResult
        """
        logger.info("=" * 60)
        logger.info(f"Stage {stage.name}: {stage.description}")
        logger.info("=" * 60)
        started = time.time()
        model = model if model is not None else self.build_model(stage)
        model.backbone.context_limit = stage.context_length
        model.train()

        controller = FreezeController(model.named_params())
        version = controller.install(stage_freeze_mask(stage, self.layout, model.parameter_groups()))
        trainable = [p for p in model.parameters() if p.requires_grad]
        if not trainable:
            raise CheckpointError(f"stage {stage.name} leaves no trainable parameters")
        optimizer = torch.optim.AdamW(trainable, lr=self.cfg.learning_rate, weight_decay=0.0)

        registry = self.registry()
        rng = np.random.default_rng([self.cfg.seed, stage_index])
        torch.manual_seed(self.cfg.seed + stage_index)
        ledger = MixtureLedger()
        runtime = StageRuntime(stage)
        mtp = self.cfg.mtp if stage.mtp_enabled else MtpConfig(enabled=False)
        losses: List[float] = []
        fired_log: List[Dict[str, Any]] = []
        step = 0

        with tqdm(total=stage.token_budget, desc=f"stage {stage.name}", unit='tok', disable=None) as bar:
            while ledger.total < stage.token_budget and (max_steps is None or step < max_steps):
                before = ledger.total
                batch = sample_batch(stage, registry, rng, runtime, ledger)
                collated = collate(batch.inputs, self.layout, self.cfg.backbone.hidden, resolver=model.resolve)
                out = model.backbone(
                    collated.ids.to(self.device),
                    collated.inject_values.to(self.device) if collated.inject_values is not None else None,
                    collated.inject_mask.to(self.device),
                )
                try:
                    loss = backbone_loss(out.logits, out.mtp_logits, collated.targets.to(self.device),
                                         collated.weights.to(self.device), mtp)
                except LossError:
                    loss = None
                if loss is None or not loss.total.requires_grad:
                    # e.g. an adapter-only stage drew a batch that never touches its adapter
                    logger.warning(f"stage {stage.name} step {step}: nothing to learn from this batch, skipped")
                    advance(ledger, runtime)
                    bar.update(ledger.total - before)
                    continue

                optimizer.zero_grad(set_to_none=True)
                loss.total.backward()
                for group in optimizer.param_groups:
                    group['lr'] = self.cfg.learning_rate * runtime.lr_scale
                controller.step(optimizer, version)

                fired = advance(ledger, runtime)
                fired_log.extend({'step': step, 'tokens': ledger.total, **m.to_dict()} for m in fired)
                losses.append(float(loss.total.detach()))
                append_metrics(self.metrics_path, {
                    'stage': stage.name,
                    'step': step,
                    'loss': losses[-1],
                    'main': float(loss.main.detach()),
                    'aux': float(loss.aux.detach()),
                    'tokens': ledger.total,
                    'mixture': ledger.fractions('tokens'),
                    'mask_factors': runtime.factors.to_dict(),
                    'lr_scale': runtime.lr_scale,
                    'fired': [m.to_dict() for m in fired],
                })
                bar.update(ledger.total - before)
                step += 1

        result = StageResult(
            name=stage.name, steps=step, tokens=ledger.total,
            final_loss=losses[-1] if losses else float('nan'),
            losses=losses, fired=fired_log, ledger=ledger.to_dict(),
            seconds=time.time() - started,
        )
        self.save_stage(model, stage, ledger, result)
        logger.info(f"✓ Stage {stage.name}: {step} steps, {ledger.total} tokens, final loss {result.final_loss:.4f}")
        return result

    def save_stage(self, model: OmniModel, stage: StageSpec, ledger: MixtureLedger, result: StageResult) -> Path:
        directory = checkpoint_dir(self.root, stage.name)
        save_weights(model.state_dict(), directory)
        ledger.save(directory / 'ledger.json')
        with open(directory / 'result.json', 'w', encoding='utf-8') as f:
            json.dump(result.to_dict(), f, indent=2, sort_keys=True)
        return directory

    def run_stages(self, stages: Sequence[StageSpec], max_steps: Optional[int] = None) -> List[StageResult]:
        """Run stages in order, each starting from its predecessor's checkpoint"""
        self.components()
        results = []
        for index, stage in enumerate(stages):
            results.append(self.run_stage(stage, max_steps=max_steps, stage_index=index))
        return results
