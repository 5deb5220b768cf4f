"""
Corpus Service - seeded synthetic corpora and the per-key sample registry

On-disk layout (under <run>/corpus):
    images/img_0000.png     shapes with a printed label
    audio/clip_0000.wav     multi-sine "speech" with a word transcript
    video/vid_0000.npy      uint8 frames (T, H, W, 3) of a moving shape
    video/vid_0000.wav      narration track
    images.jsonl, audio.jsonl, video.jsonl, texts.jsonl
    tokenizer.json          byte-level BPE trained on every text in the corpus
    manifest.json           SHA-256 of every file above

Every asset is a pure function of (config, seed), so a re-run writes
bit-identical files.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

import prompts
from config import CorpusConfig, CorpusError, EncoderConfig, RunConfig
from interleave_service import (
    MaskFactors, ModelInput, Role, Segment, SegmentKind, Turn,
    assemble, control_segment, render_template, text_segment,
)
from modality_vocab import ByteTokenizer, VocabLayout
from models.encoders import TokenBudget, audio_embedding_count, vision_embedding_count
from models.vision_tokenizer import ImageBuffer
from utils.media_utils import load_png, load_wav, save_wav

logger = logging.getLogger(__name__)


SHAPES = ('circle', 'square', 'triangle', 'diamond')
COLORS = {
    'red': (220, 40, 40),
    'green': (40, 170, 60),
    'blue': (40, 80, 220),
    'yellow': (230, 200, 30),
    'purple': (140, 60, 180),
    'orange': (240, 130, 20),
}
BACKGROUNDS = ((245, 245, 245), (30, 30, 30), (200, 220, 240))
IMAGE_SIZES = ((96, 96), (128, 96), (96, 128), (160, 112))  # (width, height)
VIDEO_SIZE = (96, 64)
DIRECTIONS = ('left', 'right')
LETTERS = 'ABCDEFGHJKLMNPRSTUVWXYZ'

# Spoken vocabulary: every word is a fixed chord scaled by the speaker's pitch
SPEECH_WORDS = ('one', 'two', 'three', 'four', 'five', 'six', 'seven', 'eight', 'nine', 'ten',
                'what', 'shape', 'color') + SHAPES + tuple(COLORS)
WORD_SECONDS = 0.4
SPEAKER_PITCH = (1.0, 1.5, 0.75, 1.25)

TEXT_TEMPLATES = (
    "the {color} {shape} is next to the {color2} {shape2}.",
    "a {shape} can be {color} or {color2}.",
    "count with me: {words}.",
    "there is a {color} {shape} above a {color2} {shape2}.",
    "i like the {shape} more than the {shape2}.",
)

CORPUS_KEYS = (
    'text', 'chat', 'image', 'audio', 'caption', 'ocr', 'vqa',
    'vision_understanding', 'vision_generation', 't2i', 'edit',
    'asr', 'tts', 'av_speech', 'video', 'think_vqa', 'think_edit', 'think_av',
)

VQA_QUESTIONS = {
    'shape': "What shape is shown?",
    'color': "What color is the shape?",
}


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class ImageRecord:
    file: str
    width: int
    height: int
    shape: str
    color: str
    background: int
    label: str

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} labeled {self.label}"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class AudioRecord:
    file: str
    speaker: int
    words: List[str]
    seconds: float

    @property
    def transcript(self) -> str:
        return ' '.join(self.words)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class VideoRecord:
    frames_file: str
    audio_file: str
    shape: str
    color: str
    direction: str
    speaker: int
    num_frames: int

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.shape} moves {self.direction}"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------------------------------------------------------
# Procedural generators
# ---------------------------------------------------------------------------

def render_shape(width: int, height: int, shape: str, color: str, background: int = 0,
                 label: str = '', offset_x: int = 0) -> Image.Image:
    """Draw one filled shape, optionally with a printed label under it"""
    if shape not in SHAPES:
        raise CorpusError(f"unknown shape {shape!r}")
    image = Image.new('RGB', (width, height), BACKGROUNDS[background % len(BACKGROUNDS)])
    draw = ImageDraw.Draw(image)
    side = int(min(width, height) * 0.5)
    cx = width // 2 + offset_x
    cy = int(height * 0.42)
    box = (cx - side // 2, cy - side // 2, cx + side // 2, cy + side // 2)
    fill = COLORS[color]
    if shape == 'circle':
        draw.ellipse(box, fill=fill)
    elif shape == 'square':
        draw.rectangle(box, fill=fill)
    elif shape == 'triangle':
        draw.polygon([(cx, box[1]), (box[2], box[3]), (box[0], box[3])], fill=fill)
    else:
        draw.polygon([(cx, box[1]), (box[2], cy), (cx, box[3]), (box[0], cy)], fill=fill)
    if label:
        ink = (0, 0, 0) if background % len(BACKGROUNDS) != 1 else (255, 255, 255)
        draw.text((max(2, cx - 4 * len(label)), min(height - 12, box[3] + 2)), label,
                  fill=ink, font=ImageFont.load_default())
    return image


def image_pixels(image: Image.Image) -> torch.Tensor:
    array = np.asarray(image.convert('RGB'), dtype=np.uint8)
    return torch.from_numpy(array.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous()


def synth_speech(words: Sequence[str], speaker: int, sample_rate: int = 16000,
                 word_seconds: float = WORD_SECONDS, noise_seed: Optional[int] = None) -> np.ndarray:
    """
    Multi-sine speech stand-in

    Each word is a three-partial chord fixed by its vocabulary index and
    scaled by the speaker's pitch, under a raised-cosine envelope.
    """
    pitch = SPEAKER_PITCH[speaker % len(SPEAKER_PITCH)]
    n = int(round(word_seconds * sample_rate))
    t = np.arange(n, dtype=np.float64) / sample_rate
    envelope = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / max(n - 1, 1))
    pieces = []
    for word in words:
        if word not in SPEECH_WORDS:
            raise CorpusError(f"word {word!r} is outside the spoken vocabulary")
        index = SPEECH_WORDS.index(word)
        base = 140.0 * pitch
        partials = (base * (1 + index % 5), base * (2 + index % 3) * 1.5, base * (3 + index % 7))
        wave = sum(np.sin(2 * np.pi * f * t) / (k + 1) for k, f in enumerate(partials))
        pieces.append(0.25 * envelope * wave)
    out = np.concatenate(pieces) if pieces else np.zeros(0)
    if noise_seed is not None:
        out = out + 0.002 * np.random.default_rng(noise_seed).standard_normal(out.shape[0])
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def _label(rng: np.random.Generator) -> str:
    return ''.join(LETTERS[i] for i in rng.integers(0, len(LETTERS), size=3))


def _text_line(rng: np.random.Generator) -> str:
    template = TEXT_TEMPLATES[int(rng.integers(len(TEXT_TEMPLATES)))]
    colors = list(COLORS)
    return template.format(
        color=colors[int(rng.integers(len(colors)))],
        color2=colors[int(rng.integers(len(colors)))],
        shape=SHAPES[int(rng.integers(len(SHAPES)))],
        shape2=SHAPES[int(rng.integers(len(SHAPES)))],
        words=' '.join(SPEECH_WORDS[int(i)] for i in rng.integers(0, 10, size=4)),
    )


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _write_jsonl(path: Path, rows: Iterable[Mapping[str, Any]]) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + '\n')


def _read_jsonl(path: Path) -> List[Dict[str, Any]]:
    if not path.is_file():
        raise CorpusError(f"missing corpus index {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return [json.loads(line) for line in f if line.strip()]


def tokenizer_texts(texts: Sequence[str], images: Sequence[ImageRecord],
                    clips: Sequence[AudioRecord], videos: Sequence[VideoRecord]) -> List[str]:
    """Every string the templates can emit, for BPE training"""
    pool = list(texts)
    pool += [r.caption for r in images] + [r.label for r in images]
    pool += [c.transcript for c in clips] + [v.caption for v in videos]
    pool += list(prompts.CAPTION_PROMPTS) + [prompts.OCR_PROMPT, prompts.ASR_PROMPT, prompts.VIDEO_PROMPT,
                                             prompts.SYSTEM_PROMPT] + list(prompts.INTENT_THINK.values())
    pool += list(VQA_QUESTIONS.values())
    return pool


def generate_corpus(cfg: RunConfig, directory: Path, seed: int) -> Dict[str, str]:
    """
    Write the synthetic corpus and its tokenizer

    Args:
        cfg: Run configuration (corpus sizes, sample rate, text vocabulary size)
        directory: Corpus directory (created)
        seed: Seed for every random choice

    Returns:
        Manifest: relative file name -> SHA-256
    """
    directory = Path(directory)
    try:
        for sub in ('images', 'audio', 'video'):
            (directory / sub).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CorpusError(f"cannot create corpus directory {directory}: {e}") from e

    c: CorpusConfig = cfg.corpus
    rate = cfg.encoders.sample_rate
    rng = np.random.default_rng(seed)

    logger.info(f"Generating {c.num_images} images...")
    images = []
    for i in range(c.num_images):
        width, height = IMAGE_SIZES[int(rng.integers(len(IMAGE_SIZES)))]
        record = ImageRecord(
            file=f"images/img_{i:04d}.png", width=width, height=height,
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            color=list(COLORS)[int(rng.integers(len(COLORS)))],
            background=int(rng.integers(len(BACKGROUNDS))),
            label=_label(rng),
        )
        render_shape(record.width, record.height, record.shape, record.color,
                     record.background, record.label).save(directory / record.file, format='PNG')
        images.append(record)
    logger.info(f"  ✓ {len(images)} images")

    words_per_clip = max(1, int(round(c.clip_seconds / WORD_SECONDS)))
    clips = []
    for i in range(c.num_audio_clips):
        words = [SPEECH_WORDS[int(j)] for j in rng.integers(0, len(SPEECH_WORDS), size=words_per_clip)]
        record = AudioRecord(file=f"audio/clip_{i:04d}.wav", speaker=i % max(c.num_speakers, 1),
                             words=words, seconds=words_per_clip * WORD_SECONDS)
        wave = synth_speech(words, record.speaker, rate, noise_seed=seed * 100003 + i)
        save_wav(torch.from_numpy(wave), directory / record.file, rate)
        clips.append(record)
    logger.info(f"  ✓ {len(clips)} audio clips")

    videos = []
    words_per_video = max(1, int(round(c.video_seconds / WORD_SECONDS)))
    for i in range(c.num_videos):
        record = VideoRecord(
            frames_file=f"video/vid_{i:04d}.npy", audio_file=f"video/vid_{i:04d}.wav",
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            color=list(COLORS)[int(rng.integers(len(COLORS)))],
            direction=DIRECTIONS[int(rng.integers(len(DIRECTIONS)))],
            speaker=i % max(c.num_speakers, 1), num_frames=c.video_frames,
        )
        step = 6 if record.direction == 'right' else -6
        frames = np.stack([
            np.asarray(render_shape(VIDEO_SIZE[0], VIDEO_SIZE[1], record.shape, record.color,
                                    offset_x=step * (f - c.video_frames // 2)), dtype=np.uint8)
            for f in range(c.video_frames)
        ])
        np.save(directory / record.frames_file, frames, allow_pickle=False)
        narration = ([record.color, record.shape] * words_per_video)[:words_per_video]
        wave = synth_speech(narration, record.speaker, rate, noise_seed=seed * 200003 + i)
        save_wav(torch.from_numpy(wave), directory / record.audio_file, rate)
        videos.append(record)
    logger.info(f"  ✓ {len(videos)} videos")

    texts = [_text_line(rng) for _ in range(c.num_texts)]

    _write_jsonl(directory / 'images.jsonl', (r.to_dict() for r in images))
    _write_jsonl(directory / 'audio.jsonl', (r.to_dict() for r in clips))
    _write_jsonl(directory / 'video.jsonl', (r.to_dict() for r in videos))
    _write_jsonl(directory / 'texts.jsonl', ({'text': t} for t in texts))

    tokenizer = ByteTokenizer.train(tokenizer_texts(texts, images, clips, videos), cfg.vocab.text_size)
    tokenizer.save(directory / 'tokenizer.json')

    manifest = {}
    for path in sorted(p for p in directory.rglob('*') if p.is_file() and p.name != 'manifest.json'):
        manifest[path.relative_to(directory).as_posix()] = _sha256(path)
    with open(directory / 'manifest.json', 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"✓ Corpus written to {directory} ({len(manifest)} files)")
    return manifest


# ---------------------------------------------------------------------------
# Loaded corpus
# ---------------------------------------------------------------------------

class Corpus:
    """Indexes of a corpus directory with lazily loaded media"""

    def __init__(self, directory: Path, sample_rate: int = 16000):
        self.directory = Path(directory)
        self.sample_rate = sample_rate
        self.images = [ImageRecord(**r) for r in _read_jsonl(self.directory / 'images.jsonl')]
        self.clips = [AudioRecord(**r) for r in _read_jsonl(self.directory / 'audio.jsonl')]
        self.videos = [VideoRecord(**r) for r in _read_jsonl(self.directory / 'video.jsonl')]
        self.texts = [r['text'] for r in _read_jsonl(self.directory / 'texts.jsonl')]
        self._pixels: Dict[int, torch.Tensor] = {}
        self._waves: Dict[str, torch.Tensor] = {}
        self._spoken: Dict[Tuple[Tuple[str, ...], int], torch.Tensor] = {}

    def tokenizer(self) -> ByteTokenizer:
        path = self.directory / 'tokenizer.json'
        if not path.is_file():
            raise CorpusError(f"missing tokenizer at {path}; run init first")
        return ByteTokenizer.load(path)

    def pixels(self, index: int) -> torch.Tensor:
        if index not in self._pixels:
            self._pixels[index] = load_png(self.directory / self.images[index].file)
        return self._pixels[index]

    def wave(self, file: str) -> torch.Tensor:
        if file not in self._waves:
            self._waves[file] = load_wav(self.directory / file, self.sample_rate)
        return self._waves[file]

    @property
    def num_speakers(self) -> int:
        return max(1, len({c.speaker for c in self.clips}))

    def spoken(self, words: Sequence[str], speaker: int) -> torch.Tensor:
        """Synthesized utterance outside the shipped clips (spoken questions and answers)"""
        key = (tuple(words), speaker)
        if key not in self._spoken:
            self._spoken[key] = torch.from_numpy(synth_speech(words, speaker, self.sample_rate))
        return self._spoken[key]

    def frames(self, index: int) -> List[torch.Tensor]:
        array = np.load(self.directory / self.videos[index].frames_file, allow_pickle=False)
        return [torch.from_numpy(f.astype(np.float32) / 255.0).permute(2, 0, 1).contiguous() for f in array]

    def verify(self) -> List[str]:
        """Files whose SHA-256 no longer matches the manifest"""
        manifest_path = self.directory / 'manifest.json'
        if not manifest_path.is_file():
            raise CorpusError(f"missing corpus manifest {manifest_path}")
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
        return [name for name, digest in manifest.items()
                if not (self.directory / name).is_file() or _sha256(self.directory / name) != digest]


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

def required_keys(stages) -> Set[str]:
    keys: Set[str] = set()
    for stage in stages:
        keys.update(stage.mixture)
    return keys


def missing_keys(stages) -> List[str]:
    """Mixture keys of the given stages that no corpus builder serves"""
    return sorted(required_keys(stages) - set(CORPUS_KEYS))


class CorpusRegistry:
    """
    Serves assembled samples per mixture key

    Each key walks its own pool with a cursor; with ``cycle`` off a pool is
    exhausted after one pass. Discrete vision and audio ids are computed
    once per asset with the (frozen) tokenizers and cached. Audio inputs
    carry both streams, so they need the audio tokenizer too.
    """

    def __init__(
        self,
        corpus: Corpus,
        layout: VocabLayout,
        tokenizer: ByteTokenizer,
        vision_tokenizer=None,
        audio_tokenizer=None,
        encoder_cfg: Optional[EncoderConfig] = None,
        cycle: bool = True,
        seed: int = 0
    ):
        self.corpus = corpus
        self.layout = layout
        self.tokenizer = tokenizer
        self.vision_tokenizer = vision_tokenizer
        self.audio_tokenizer = audio_tokenizer
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.budget = TokenBudget.from_config(self.encoder_cfg)
        self.cycle = cycle
        self.seed = seed
        self.cursors: Dict[str, int] = {}
        self._vision_ids: Dict[Any, List[int]] = {}
        self._audio_ids: Dict[Any, List[int]] = {}
        self._builders: Dict[str, Tuple[Callable[[int], Tuple[List[Any], Optional[str]]], int]] = {
            'text': (self._text, len(corpus.texts)),
            'chat': (self._chat, len(corpus.texts)),
            'image': (self._image_pair, len(corpus.images)),
            'audio': (self._audio_pair, len(corpus.clips)),
            'caption': (self._caption, len(corpus.images)),
            'ocr': (self._ocr, len(corpus.images)),
            'vqa': (self._vqa, len(corpus.images)),
            'vision_understanding': (self._vision_understanding, len(corpus.images)),
            'vision_generation': (self._t2i, len(corpus.images)),
            't2i': (self._t2i, len(corpus.images)),
            'edit': (self._edit, len(corpus.images)),
            'asr': (self._asr, len(corpus.clips)),
            'tts': (self._tts, len(corpus.clips)),
            'av_speech': (self._av_speech, len(corpus.images)),
            'video': (self._video, len(corpus.videos)),
            'think_vqa': (lambda i: (self._vqa(i)[0], 'vqa'), len(corpus.images)),
            'think_edit': (lambda i: (self._edit(i)[0], 'image_edit'), len(corpus.images)),
            'think_av': (lambda i: (self._av_speech(i)[0], 'audio_visual_speech'), len(corpus.images)),
        }

    def has(self, key: str) -> bool:
        return key in self._builders and self._builders[key][1] > 0

    def keys(self) -> List[str]:
        return [k for k in self._builders if self.has(k)]

    def _next_index(self, key: str) -> int:
        if not self.has(key):
            raise CorpusError(f"no corpus for mixture key {key!r}")
        size = self._builders[key][1]
        cursor = self.cursors.get(key, 0)
        if cursor >= size and not self.cycle:
            raise CorpusError(f"corpus for {key!r} exhausted after {size} items (cycling disabled)")
        self.cursors[key] = cursor + 1
        return cursor % size

    def build(self, key: str, index: int) -> Tuple[List[Any], Optional[str]]:
        """(turns or flat segments, think intent) for one pool item"""
        if not self.has(key):
            raise CorpusError(f"no corpus for mixture key {key!r}")
        return self._builders[key][0](index)

    def sample(
        self,
        key: str,
        factors: MaskFactors = MaskFactors(),
        target_roles: Optional[Set[Role]] = None,
        max_length: Optional[int] = None
    ) -> ModelInput:
        index = self._next_index(key)
        content, think = self.build(key, index)
        if content and isinstance(content[0], Turn):
            segments = render_template(content, self.layout, self.tokenizer, think=think)
        else:
            segments = content
        item = assemble(segments, self.layout, factors, target_roles=target_roles)
        item.tags.update(key=key, index=index)
        if max_length is not None:
            item = item.truncate(max_length)
        return item

    # -- cached discrete ids ---------------------------------------------

    def vision_ids(self, index: int, shape: Optional[str] = None) -> List[int]:
        """729 local ids of a corpus image, or of its re-rendered variant with another shape"""
        cache_key = (index, shape)
        if cache_key not in self._vision_ids:
            if self.vision_tokenizer is None:
                raise CorpusError("vision keys need a vision tokenizer")
            pixels = self.corpus.pixels(index) if shape is None else self.edit_target_pixels(index, shape)
            grid = self.vision_tokenizer.tokenize_any(ImageBuffer(pixels=pixels))
            self._vision_ids[cache_key] = grid.flat()
        return self._vision_ids[cache_key]

    def audio_ids(self, key: Any, wave: torch.Tensor) -> List[int]:
        if key not in self._audio_ids:
            if self.audio_tokenizer is None:
                raise CorpusError("audio keys need an audio tokenizer")
            self._audio_ids[key] = [int(c) for c in self.audio_tokenizer.tokenize(wave)]
        return self._audio_ids[key]

    def edit_target_pixels(self, index: int, shape: str) -> torch.Tensor:
        r = self.corpus.images[index]
        return image_pixels(render_shape(r.width, r.height, shape, r.color, r.background, r.label))

    def edit_shape(self, index: int) -> str:
        current = self.corpus.images[index].shape
        return SHAPES[(SHAPES.index(current) + 1 + index % (len(SHAPES) - 1)) % len(SHAPES)]

    # -- segment helpers -------------------------------------------------

    def _text_seg(self, text: str) -> Segment:
        return text_segment(self.tokenizer, text)

    def _vision_continuous(self, index: int, edit_pair: bool = False) -> Segment:
        pixels = self.corpus.pixels(index)
        length = vision_embedding_count([tuple(pixels.shape[1:])], self.encoder_cfg, self.budget.image_budget)
        return Segment(kind=SegmentKind.VISION_CONTINUOUS, source={'frames': [pixels], 'video': False},
                       length=length, edit_pair=edit_pair)

    def _vision_discrete(self, index: int, shape: Optional[str] = None) -> Segment:
        return Segment(kind=SegmentKind.VISION_DISCRETE, ids=self.vision_ids(index, shape))

    def _audio_continuous(self, wave: torch.Tensor, compressed: bool = False) -> Segment:
        length = audio_embedding_count(int(wave.shape[0]), self.encoder_cfg, compressed=compressed)
        return Segment(kind=SegmentKind.AUDIO_CONTINUOUS, source={'waveform': wave},
                       length=length, compressed=compressed)

    def _audio_discrete(self, key: Any, wave: torch.Tensor) -> Segment:
        return Segment(kind=SegmentKind.AUDIO_DISCRETE, ids=self.audio_ids(key, wave))

    def _audio_input(self, key: Any, wave: torch.Tensor, compressed: bool = False) -> List[Segment]:
        """Understanding input: the continuous span, then the discrete span of the same clip"""
        return [self._audio_continuous(wave, compressed=compressed), self._audio_discrete(key, wave)]

    def _eot(self) -> Segment:
        return control_segment(self.layout, [prompts.END_OF_TEXT], Role.USER)

    # -- builders --------------------------------------------------------

    def _text(self, i: int):
        return [self._text_seg(self.corpus.texts[i]), self._eot()], None

    def _chat(self, i: int):
        words = self.corpus.texts[i].split()
        half = max(1, len(words) // 2)
        return [
            Turn(Role.USER, [self._text_seg("Continue: " + ' '.join(words[:half]))]),
            Turn(Role.ASSISTANT, [self._text_seg(' '.join(words[half:]) or words[-1])]),
        ], None

    def _image_pair(self, i: int):
        caption = self._text_seg(self.corpus.images[i].caption)
        image = self._vision_discrete(i)
        ordered = [caption, image] if i % 2 == 0 else [image, caption]
        return ordered + [self._eot()], None

    def _audio_pair(self, i: int):
        clip = self.corpus.clips[i]
        wave = self.corpus.wave(clip.file)
        transcript = self._text_seg(clip.transcript)
        audio = self._audio_discrete(clip.file, wave)
        ordered = [transcript, audio] if i % 2 == 0 else [audio, transcript]
        return ordered + [self._eot()], None

    def _caption(self, i: int):
        question = prompts.CAPTION_PROMPTS[i % len(prompts.CAPTION_PROMPTS)]
        return [
            Turn(Role.USER, [self._vision_continuous(i), self._text_seg(question)]),
            Turn(Role.ASSISTANT, [self._text_seg(self.corpus.images[i].caption)]),
        ], None

    def _ocr(self, i: int):
        return [
            Turn(Role.USER, [self._vision_continuous(i), self._text_seg(prompts.OCR_PROMPT)]),
            Turn(Role.ASSISTANT, [self._text_seg(self.corpus.images[i].label)]),
        ], None

    def _vqa(self, i: int):
        record = self.corpus.images[i]
        topic = 'shape' if i % 2 == 0 else 'color'
        return [
            Turn(Role.USER, [self._vision_continuous(i), self._text_seg(VQA_QUESTIONS[topic])]),
            Turn(Role.ASSISTANT, [self._text_seg(getattr(record, topic))]),
        ], None

    def _vision_understanding(self, i: int):
        return (self._caption(i) if i % 2 == 0 else self._vqa(i))

    def _t2i(self, i: int):
        prompt = prompts.T2I_PROMPT.format(caption=self.corpus.images[i].caption)
        return [
            Turn(Role.USER, [self._text_seg(prompt)]),
            Turn(Role.ASSISTANT, [self._vision_discrete(i)]),
        ], None

    def _edit(self, i: int):
        shape = self.edit_shape(i)
        return [
            Turn(Role.USER, [
                self._vision_continuous(i, edit_pair=True),
                self._vision_discrete(i),
                self._text_seg(prompts.EDIT_PROMPT.format(shape=shape)),
            ]),
            Turn(Role.ASSISTANT, [self._vision_discrete(i, shape=shape)]),
        ], None

    def _asr(self, i: int):
        clip = self.corpus.clips[i]
        audio = self._audio_input(clip.file, self.corpus.wave(clip.file))
        return [
            Turn(Role.USER, audio + [self._text_seg(prompts.ASR_PROMPT)]),
            Turn(Role.ASSISTANT, [self._text_seg(clip.transcript)]),
        ], None

    def _tts(self, i: int):
        clip = self.corpus.clips[i]
        wave = self.corpus.wave(clip.file)
        return [
            Turn(Role.USER, [self._text_seg(prompts.TTS_PROMPT.format(text=clip.transcript))]),
            Turn(Role.ASSISTANT, [self._audio_discrete(clip.file, wave)]),
        ], None

    def _av_speech(self, i: int):
        record = self.corpus.images[i]
        speaker = i % self.corpus.num_speakers
        question = self.corpus.spoken(['what', 'shape'], speaker)
        answer = self.corpus.spoken([record.shape], speaker)
        return [
            Turn(Role.USER, [self._vision_continuous(i)] + self._audio_input(('question', speaker), question)),
            Turn(Role.ASSISTANT, [self._audio_discrete(('answer', record.shape, speaker), answer),
                                  self._text_seg(record.shape)]),
        ], None

    def _video(self, i: int):
        record = self.corpus.videos[i]
        frames = self.corpus.frames(i)
        sizes = [tuple(f.shape[1:]) for f in frames]
        length = vision_embedding_count(sizes, self.encoder_cfg, self.budget.video_budget)
        visual = Segment(kind=SegmentKind.VISION_CONTINUOUS, source={'frames': frames, 'video': True},
                         length=length)
        track = self._audio_input(record.audio_file, self.corpus.wave(record.audio_file), compressed=True)
        return [
            Turn(Role.USER, [visual] + track + [self._text_seg(prompts.VIDEO_PROMPT)]),
            Turn(Role.ASSISTANT, [self._text_seg(record.caption)]),
        ], None
