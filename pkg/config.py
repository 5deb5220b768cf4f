"""
OmniStack configuration

Two layers:
- ``Config``: process-level settings read from the environment (``.env`` is
  loaded by the CLI), selected through ``get_config()``.
- ``RunConfig``: the per-run model/corpus description serialized as
  ``config.json``. Every sub-config is a dataclass with exact JSON round-trip.
"""
import os
from dataclasses import dataclass, field, asdict, fields, is_dataclass
from typing import Any, Dict, List, get_type_hints

_current_file = os.path.realpath(__file__)
BASE_DIR = os.path.dirname(_current_file)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class OmniStackError(ValueError):
    """Base class for every error raised by this package"""


class ConfigError(OmniStackError):
    pass


class VocabError(OmniStackError):
    pass


class QuantizerError(OmniStackError):
    pass


class ShapeError(OmniStackError):
    pass


class TemplateError(OmniStackError):
    pass


class LossError(OmniStackError):
    pass


class CorpusError(OmniStackError):
    pass


class StageError(OmniStackError):
    pass


class CheckpointError(OmniStackError):
    pass


class UsageError(OmniStackError):
    pass


# ---------------------------------------------------------------------------
# Environment layer
# ---------------------------------------------------------------------------

class Config:
    """Base configuration"""
    # Output root for runs
    OMNISTACK_HOME = os.getenv('OMNISTACK_HOME', os.path.join(os.getcwd(), 'omnistack_runs'))

    # Compute device and thread count
    DEVICE = os.getenv('OMNISTACK_DEVICE', 'cpu')
    NUM_THREADS = int(os.getenv('OMNISTACK_NUM_THREADS', '1'))

    # Logging
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO').upper()

    # Full-scale stage budgets are multiplied by this to get toy token budgets
    BUDGET_SCALE = float(os.getenv('OMNISTACK_BUDGET_SCALE', '1e-6'))

    # Metrics / checkpoints
    METRICS_FILENAME = 'metrics.jsonl'
    CHECKPOINT_DIRNAME = 'checkpoints'
    CORPUS_DIRNAME = 'corpus'


class DevelopmentConfig(Config):
    """Development configuration"""
    DEBUG = True


class ProductionConfig(Config):
    """Production configuration"""
    DEBUG = False


config_map = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'default': DevelopmentConfig
}


def get_config():
    """Get configuration based on environment"""
    env = os.getenv('OMNISTACK_ENV', 'development')
    return config_map.get(env, DevelopmentConfig)


# ---------------------------------------------------------------------------
# Run layer
# ---------------------------------------------------------------------------

DEFAULT_SPECIAL_TOKENS = [
    "<|pad|>",
    "<|endoftext|>",
    "<|im_start|>",
    "<|im_end|>",
    "<think>",
    "</think>",
    "<|vision_start|>",
    "<|vision_end|>",
    "<|audio_start|>",
    "<|audio_end|>",
    "<|speaker_ref|>",
    "<|system|>",
    "<|user|>",
    "<|assistant|>",
    "<|slot|>",
    "<|edit|>",
]


@dataclass
class VocabConfig:
    special_tokens: List[str] = field(default_factory=lambda: list(DEFAULT_SPECIAL_TOKENS))
    text_size: int = 1024
    vision_size: int = 512
    audio_size: int = 6561


@dataclass
class FsqConfig:
    dims: int = 8
    k: int = 1
    bound_scale: float = 1.0
    feature_dim: int = 128  # width of the features entering the low-rank projection
    steps: int = 200  # fitting steps for the projection pair

    @property
    def levels(self) -> int:
        return 2 * self.k + 1

    @property
    def codebook_size(self) -> int:
        return self.levels ** self.dims


@dataclass
class VisionTokenizerConfig:
    image_size: int = 384
    grid: int = 27
    patch_stride: int = 16
    feature_dim: int = 64
    codebook_size: int = 512
    ema_decay: float = 0.99
    commitment: float = 0.25
    lr: float = 1e-3
    steps: int = 200


@dataclass
class EncoderConfig:
    sample_rate: int = 16000
    n_mels: int = 128
    window_ms: float = 25.0
    hop_ms: float = 10.0
    audio_width: int = 128
    audio_layers: int = 2
    audio_heads: int = 4
    adapter_hidden_mult: int = 4
    compress_window: int = 25
    vision_patch: int = 16
    vision_width: int = 128
    image_budget: int = 3072
    video_budget: int = 11264
    max_video_frames: int = 120


@dataclass
class BackboneConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    context_length: int = 512
    mlp_mult: int = 4
    rope_base: float = 10000.0


@dataclass
class MtpConfig:
    enabled: bool = True
    weight: float = 0.2
    extra_layers: int = 1


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 0
    max_new: int = 256


@dataclass
class VisionDecoderConfig:
    latent_factor: int = 8
    latent_channels: int = 3
    width: int = 256
    blocks: int = 8
    heads: int = 4
    patch: int = 2
    bad_width: int = 128
    bad_blocks: int = 4
    bad_step_fraction: float = 0.05
    guidance_scale: float = 1.75
    sample_steps: int = 25
    lr: float = 3e-4
    steps: int = 2000
    output_size: int = 384


@dataclass
class VocoderConfig:
    sample_rate: int = 16000
    token_rate: int = 25
    upsample_factors: List[int] = field(default_factory=lambda: [8, 5, 4, 4])
    initial_channels: int = 128
    resblock_dilations: List[int] = field(default_factory=lambda: [1, 3, 9])
    code_embed_dim: int = 64
    speaker_dim: int = 64
    speaker_mels: int = 64
    min_reference_seconds: float = 0.5
    activation: str = "snake"
    lr: float = 2e-3
    steps: int = 1000

    @property
    def hop_length(self) -> int:
        product = 1
        for factor in self.upsample_factors:
            product *= factor
        return product


@dataclass
class CorpusConfig:
    num_images: int = 48
    num_audio_clips: int = 24
    num_videos: int = 6
    num_texts: int = 64
    num_speakers: int = 2
    clip_seconds: float = 2.0
    video_frames: int = 8
    video_seconds: float = 4.0


@dataclass
class RunConfig:
    vocab: VocabConfig = field(default_factory=VocabConfig)
    fsq: FsqConfig = field(default_factory=FsqConfig)
    vision_tokenizer: VisionTokenizerConfig = field(default_factory=VisionTokenizerConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    mtp: MtpConfig = field(default_factory=MtpConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    vision_decoder: VisionDecoderConfig = field(default_factory=VisionDecoderConfig)
    vocoder: VocoderConfig = field(default_factory=VocoderConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    seed: int = 0
    budget_scale: float = 1e-6
    learning_rate: float = 3e-4
    output_dir: str = ""
    stages_file: str = "stages.json"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        return _build_dataclass(cls, data)

    def validate(self) -> 'RunConfig':
        """Raise ConfigError listing every inconsistency found"""
        problems = []
        if self.vocab.audio_size != self.fsq.codebook_size:
            problems.append(
                f"audio codebook {self.vocab.audio_size} != FSQ lattice "
                f"{self.fsq.levels}^{self.fsq.dims} = {self.fsq.codebook_size}"
            )
        if self.vocab.vision_size != self.vision_tokenizer.codebook_size:
            problems.append(
                f"vision codebook {self.vocab.vision_size} != tokenizer codebook "
                f"{self.vision_tokenizer.codebook_size}"
            )
        if self.vocoder.hop_length * self.vocoder.token_rate != self.vocoder.sample_rate:
            problems.append(
                f"vocoder factors {self.vocoder.upsample_factors} x {self.vocoder.token_rate} Hz "
                f"!= {self.vocoder.sample_rate} Hz"
            )
        if self.vocoder.sample_rate != self.encoders.sample_rate:
            problems.append("vocoder and encoder sample rates differ")
        if self.backbone.hidden % self.backbone.heads != 0:
            problems.append(f"hidden {self.backbone.hidden} not divisible by heads {self.backbone.heads}")
        if self.backbone.context_length < 2:
            problems.append("context_length must be >= 2")
        if self.fsq.dims < 1 or self.fsq.k < 1:
            problems.append("FSQ needs dims >= 1 and k >= 1")
        if self.mtp.weight < 0:
            problems.append("MTP weight must be >= 0")
        if self.fsq.feature_dim != self.encoders.audio_width:
            problems.append("FSQ feature_dim must equal the audio encoder width")
        if len(set(self.vocab.special_tokens)) != len(self.vocab.special_tokens):
            problems.append("duplicate special token names")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


def _build_dataclass(cls, data: Dict[str, Any]):
    hints = get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if is_dataclass(hints[f.name]) and isinstance(value, dict):
            value = _build_dataclass(hints[f.name], value)
        kwargs[f.name] = value
    return cls(**kwargs)


def tiny_run_config(seed: int = 0) -> RunConfig:
    """Smallest consistent configuration, used by tests and smoke runs"""
    cfg = RunConfig(seed=seed)
    cfg.vocab.text_size = 320
    cfg.vocab.vision_size = 32
    cfg.vision_tokenizer.codebook_size = 32
    cfg.vision_tokenizer.feature_dim = 16
    cfg.vision_tokenizer.steps = 5
    cfg.fsq.steps = 5
    cfg.encoders.audio_width = 32
    cfg.encoders.audio_heads = 2
    cfg.encoders.vision_width = 32
    cfg.fsq.feature_dim = 32
    cfg.backbone.layers = 2
    cfg.backbone.hidden = 32
    cfg.backbone.heads = 2
    cfg.vision_decoder.width = 32
    cfg.vision_decoder.blocks = 2
    cfg.vision_decoder.heads = 2
    cfg.vision_decoder.bad_width = 16
    cfg.vision_decoder.bad_blocks = 1
    cfg.vision_decoder.sample_steps = 4
    cfg.vision_decoder.steps = 40
    cfg.vision_decoder.output_size = 64
    cfg.vocoder.initial_channels = 32
    cfg.vocoder.code_embed_dim = 16
    cfg.vocoder.speaker_dim = 16
    cfg.vocoder.steps = 10
    cfg.corpus.num_images = 8
    cfg.corpus.num_audio_clips = 4
    cfg.corpus.num_videos = 2
    cfg.corpus.num_texts = 8
    cfg.corpus.video_frames = 2
    cfg.corpus.video_seconds = 2.0
    cfg.budget_scale = 1e-9
    return cfg
