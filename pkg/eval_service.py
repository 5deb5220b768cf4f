"""
Eval Service - acceptance checks grouped into suites

    unit        1, 2, 4, 9, 10    exact algebra, no training
    properties  3, 5, 6, 7, 8, 11 structural properties on fresh init
    e2e         12, 13, 14        need a trained run directory

Every report lists all fourteen criteria; those outside the requested suite
are marked ``not_run``.
"""
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import torch
import torch.nn.functional as F

import prompts
from config import MtpConfig, RunConfig, UsageError, CheckpointError
from interleave_service import MaskFactors, Segment, SegmentKind, assemble
from modality_vocab import REGION_ORDER, FreezePolicy, Region, VocabLayout, expansion_freeze_mask, layout_from_config
from models.backbone import (
    IGNORE_INDEX, VISION_SPAN_LENGTH, ConstrainedSampler, OmniBackbone, SamplerMode, SamplerState,
    backbone_loss, weighted_ce, weighted_ce_sum,
)
from models.encoders import AudioAdapter, AudioEncoder, TemporalCompressor, audio_embedding_count, log_mel
from models.fsq import code_to_digits, dequantize, digits_to_code, quantize
from models.vision_decoder import (
    CondGrid, GuidanceConfig, VisionDecoder, build_decoder, count_parameters, encode_latent,
    prepare_examples, psnr, rectified_flow_loss, sample_latent, tokens_to_cond, train_decoder, validation_loss,
)
from models.vision_tokenizer import ImageBuffer, VisionTokenGrid, VisionTokenizer
from models.vocoder import UnitGenerator, train_vocoder, vocoder_loss
from stage_orchestrator import (
    STAGE_ORDER, FreezeController, MixtureLedger, StageRuntime, advance, builtin_stages, draw_keys,
)
from utils.coordinate_utils import latent_size
from utils.gradcheck import check_gradients
from utils.media_utils import load_png, load_wav, resize_pixels
from utils.path_utils import require_checkpoint

logger = logging.getLogger(__name__)

CRITERIA = {
    1: 'fsq_bijection',
    2: 'fsq_anchors',
    3: 'gradient_checks',
    4: 'mtp_composition',
    5: 'freeze_policy',
    6: 'loss_masking',
    7: 'mixture_concentration',
    8: 'interleave_integrity',
    9: 'rate_algebra',
    10: 'conditioning_geometry',
    11: 'autoguidance_identity',
    12: 'overfit_oracles',
    13: 'conditioning_comparison',
    14: 'end_to_end_smoke',
}

SUITES = {
    'unit': (1, 2, 4, 9, 10),
    'properties': (3, 5, 6, 7, 8, 11),
    'e2e': (12, 13, 14),
}

SHIPPED_SEED = 0
P2_TARGET_FRACTIONS = {'text': 0.20, 'image': 0.65, 'audio': 0.15}


@dataclass
class CheckResult:
    criterion: int
    name: str
    status: str = 'not_run'  # pass | fail | not_run
    measured: Any = None
    tolerance: Any = None
    detail: str = ''
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == 'pass'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class EvalReport:
    suite: str
    seed: int
    environment: Dict[str, Any] = field(default_factory=dict)
    checks: Dict[int, CheckResult] = field(default_factory=dict)

    @property
    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks.values() if c.status == 'fail']

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> Dict[str, Any]:
        return {
            'suite': self.suite,
            'seed': self.seed,
            'environment': self.environment,
            'ok': self.ok,
            'checks': [self.checks[i].to_dict() for i in sorted(self.checks)],
        }

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True, default=str)
        return path


def environment_fingerprint() -> Dict[str, Any]:
    return {
        'python': platform.python_version(),
        'platform': platform.platform(),
        'torch': torch.__version__,
        'numpy': np.__version__,
        'threads': torch.get_num_threads(),
        'deterministic': torch.are_deterministic_algorithms_enabled(),
    }


def _result(criterion: int, ok: bool, measured=None, tolerance=None, detail: str = '') -> CheckResult:
    return CheckResult(criterion=criterion, name=CRITERIA[criterion], status='pass' if ok else 'fail',
                       measured=measured, tolerance=tolerance, detail=detail)


def _perturb(module: torch.nn.Module, scale: float, seed: int) -> None:
    """Seeded noise on every weight, so zero-initialized output layers do not hide anything"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=generator, dtype=p.dtype))


# ---------------------------------------------------------------------------
# unit
# ---------------------------------------------------------------------------

def check_fsq_bijection(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    fsq = cfg.fsq
    codes = torch.arange(fsq.codebook_size)
    digits = code_to_digits(codes, fsq)
    round_trip = bool(torch.equal(digits_to_code(digits, fsq), codes))
    fixed, _ = quantize(dequantize(codes, fsq), fsq)
    fixed_point = bool(torch.equal(fixed, codes))
    return _result(1, round_trip and fixed_point, measured={'codes': fsq.codebook_size, 'round_trip': round_trip,
                                                           'fixed_point': fixed_point}, tolerance='exact')


def check_fsq_anchors(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    fsq = cfg.fsq
    center, _ = quantize(torch.zeros(fsq.dims), fsq)
    low, _ = quantize(torch.full((fsq.dims,), -math.inf), fsq)
    high, _ = quantize(torch.full((fsq.dims,), math.inf), fsq)
    expected = ((fsq.codebook_size - 1) // 2, 0, fsq.codebook_size - 1)
    measured = (int(center), int(low), int(high))
    return _result(2, measured == expected, measured=measured, tolerance=f"exact {expected}")


def _tiny_batch(layout: VocabLayout, length: int, seed: int, dtype=torch.float64):
    generator = torch.Generator().manual_seed(seed)
    ids = torch.randint(0, layout.total, (2, length), generator=generator)
    weights = torch.rand((2, length - 1), generator=generator, dtype=dtype) + 0.5
    return ids, ids[:, 1:].clone(), weights


def check_mtp_composition(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    layout = layout_from_config(cfg.vocab)
    torch.manual_seed(seed)
    mtp = MtpConfig(enabled=True, weight=cfg.mtp.weight, extra_layers=cfg.mtp.extra_layers)
    model = OmniBackbone(cfg.backbone, layout.total, mtp).double()
    ids, targets, weights = _tiny_batch(layout, 16, seed)
    with torch.no_grad():
        out = model(ids)
        loss = backbone_loss(out.logits, out.mtp_logits, targets, weights, mtp)
    composed = float(loss.main) + mtp.weight * float(loss.aux)
    rel = abs(float(loss.total) - composed) / max(abs(composed), 1e-12)
    return _result(4, rel < 1e-6 and mtp.weight == 0.2, measured={'relative_error': rel, 'weight': mtp.weight},
                   tolerance=1e-6)


def check_rate_algebra(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    enc = cfg.encoders
    samples = 10 * enc.sample_rate
    wave = torch.zeros(samples)
    frames = log_mel(wave, enc).num_frames
    torch.manual_seed(seed)
    encoder = AudioEncoder(enc)
    with torch.no_grad():
        embeddings = encoder(log_mel(wave, enc).values.unsqueeze(0)).shape[1]
        compressed = TemporalCompressor(enc.audio_width, enc.compress_window)(
            torch.zeros(embeddings, enc.audio_width)).shape[0]
    counted = (audio_embedding_count(samples, enc), audio_embedding_count(samples, enc, compressed=True))
    generator = UnitGenerator(cfg.vocoder, cfg.fsq.codebook_size)
    codes = torch.zeros(1, cfg.vocoder.token_rate, dtype=torch.long)
    with torch.no_grad():
        out = generator(codes, torch.zeros(1, cfg.vocoder.speaker_dim)).shape[-1]
    measured = {'mel_frames': frames, 'embeddings': embeddings, 'compressed': compressed,
                'counted': list(counted), 'vocoder_samples': out}
    ok = (frames, embeddings, compressed, counted, out) == (1000, 250, 10, (250, 10), cfg.vocoder.sample_rate)
    return _result(9, ok, measured=measured, tolerance='exact: 1000 / 250 / 10 / 16000')


def check_conditioning_geometry(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    width, height = 928, 624
    lat_w, lat_h = latent_size(width, height, cfg.vision_decoder.latent_factor)
    torch.manual_seed(seed)
    tokenizer = VisionTokenizer(cfg.vision_tokenizer)
    grid_ids = torch.randint(0, cfg.vision_tokenizer.codebook_size, (cfg.vision_tokenizer.grid,) * 2)
    grid = VisionTokenGrid(ids=grid_ids, codebook_size=cfg.vision_tokenizer.codebook_size,
                           original_size=(width, height))
    cond = tokens_to_cond(tokenizer, grid, (lat_h, lat_w))
    main = build_decoder(cfg.vision_decoder, cfg.vision_tokenizer.feature_dim)
    decoder = VisionDecoder(tokenizer, main, cfg.vision_decoder)
    pixels = decoder.decode_grid(grid, seed=seed, steps=1, guidance_scale=1.0)
    out_h, out_w = int(pixels.shape[1]), int(pixels.shape[2])
    ok = cond.spatial == (78, 116) and (out_w, out_h) == (width, height) \
        and out_w * height == out_h * width
    return _result(10, ok, measured={'cond_hw': list(cond.spatial), 'decoded_wh': [out_w, out_h]},
                   tolerance='cond 78x116, aspect exact')


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

def check_gradients_suite(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    layout = layout_from_config(cfg.vocab)
    results = {}
    torch.manual_seed(seed)

    mtp = MtpConfig(enabled=True, weight=cfg.mtp.weight, extra_layers=cfg.mtp.extra_layers)
    backbone = OmniBackbone(cfg.backbone, layout.total, mtp).double()
    ids, targets, weights = _tiny_batch(layout, 12, seed)

    def backbone_fn():
        out = backbone(ids)
        return backbone_loss(out.logits, out.mtp_logits, targets, weights, mtp).total
    results['backbone'] = check_gradients(backbone_fn, list(backbone.named_parameters()), seed=seed)

    adapter = AudioAdapter(cfg.encoders.audio_width, cfg.backbone.hidden, cfg.encoders.adapter_hidden_mult).double()
    x = torch.randn(10, cfg.encoders.audio_width, dtype=torch.float64)
    target = torch.randn(10, cfg.backbone.hidden, dtype=torch.float64)
    results['audio_adapter'] = check_gradients(lambda: F.mse_loss(adapter(x), target),
                                               list(adapter.named_parameters()), seed=seed)

    decoder = build_decoder(cfg.vision_decoder, cfg.vision_tokenizer.feature_dim).double()
    _perturb(decoder, 0.02, seed)
    x0 = torch.rand(2, cfg.vision_decoder.latent_channels, 6, 6, dtype=torch.float64)
    cond = torch.randn(2, cfg.vision_tokenizer.feature_dim, 6, 6, dtype=torch.float64)
    t = torch.rand(2, dtype=torch.float64)
    noise = torch.randn(x0.shape, dtype=torch.float64)
    results['decoder'] = check_gradients(lambda: rectified_flow_loss(decoder, x0, cond, t, noise),
                                         list(decoder.named_parameters()), seed=seed)

    generator = UnitGenerator(cfg.vocoder, cfg.fsq.codebook_size).double()
    codes = torch.randint(0, cfg.fsq.codebook_size, (1, 4))
    speaker = torch.randn(1, cfg.vocoder.speaker_dim, dtype=torch.float64)
    wave = 0.5 * torch.randn(1, 4 * cfg.vocoder.hop_length, dtype=torch.float64)
    results['vocoder_snake'] = check_gradients(lambda: vocoder_loss(generator(codes, speaker), wave),
                                               generator.snake_parameters(), seed=seed)

    measured = {k: {'checked': r.checked, 'max_rel_error': r.max_rel_error, 'worst': r.worst_name}
                for k, r in results.items()}
    ok = all(r.passed(1e-4) and r.checked >= 50 for r in results.values())
    return _result(3, ok, measured=measured, tolerance='relative error < 1e-4 on >= 50 entries each')


def check_freeze_policy(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    layout = layout_from_config(cfg.vocab)
    torch.manual_seed(seed)
    model = OmniBackbone(cfg.backbone, layout.total, MtpConfig(enabled=False))
    params = dict(model.named_parameters())
    controller = FreezeController(params)
    version = controller.install(expansion_freeze_mask(layout, FreezePolicy.VOCAB_EXPANSION,
                                                       model.parameter_groups()))
    before = {n: p.detach().clone() for n, p in params.items()}
    optimizer = torch.optim.AdamW([p for p in params.values() if p.requires_grad], lr=1e-2)
    ids, targets, weights = _tiny_batch(layout, 32, seed, dtype=torch.float32)
    out = model(ids)
    backbone_loss(out.logits, None, targets, weights, MtpConfig(enabled=False)).total.backward()
    controller.step(optimizer, version)

    start = layout.offset(Region.VISION)
    text_rows_same = all(torch.equal(params[n][:start], before[n][:start])
                         for n in ('embedding.weight', 'output_head.weight'))
    layers_same = all(torch.equal(p, before[n]) for n, p in params.items()
                      if not n.startswith(('embedding.', 'output_head.')))
    changed = int((params['embedding.weight'][start:] != before['embedding.weight'][start:]).any(dim=1).sum())
    return _result(5, text_rows_same and layers_same and changed >= 1,
                   measured={'text_rows_identical': text_rows_same, 'layers_identical': layers_same,
                             'modality_rows_changed': changed}, tolerance='bit-identical; >= 1 row changes')


def _vision_sample(layout: VocabLayout, factors: MaskFactors, seed: int):
    generator = torch.Generator().manual_seed(seed)
    text = torch.randint(0, layout.text_size, (6,), generator=generator).tolist()
    vision = torch.randint(0, layout.vision_codebook_size, (VISION_SPAN_LENGTH,), generator=generator).tolist()
    segments = [Segment(kind=SegmentKind.TEXT_IDS, ids=text),
                Segment(kind=SegmentKind.VISION_DISCRETE, ids=vision),
                Segment(kind=SegmentKind.TEXT_IDS, ids=text)]
    return assemble(segments, layout, factors)


def check_loss_masking(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    layout = layout_from_config(cfg.vocab)
    zero = _vision_sample(layout, MaskFactors(vision=0.0), seed)
    generator = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, len(zero), layout.total, generator=generator, dtype=torch.float64, requires_grad=True)
    weighted_ce(logits[:, :-1], zero.targets.unsqueeze(0), zero.weights.unsqueeze(0)).backward()
    vision_rows = layout.region_of_ids(zero.targets.clamp_min(0)) == REGION_ORDER.index(Region.VISION)
    vision_rows &= zero.targets != IGNORE_INDEX
    zero_grad = bool((logits.grad[0, :-1][vision_rows] == 0).all()) and int(vision_rows.sum()) > 0

    def vision_contribution(factor: float) -> float:
        item = _vision_sample(layout, MaskFactors(vision=factor), seed)
        targets = item.targets.clone()
        targets[~vision_rows] = IGNORE_INDEX
        numerator, _ = weighted_ce_sum(logits.detach()[:, :-1], targets.unsqueeze(0), item.weights.unsqueeze(0))
        return float(numerator)

    full, half = vision_contribution(1.0), vision_contribution(0.5)
    return _result(6, zero_grad and half == 0.5 * full,
                   measured={'vision_rows_zero_grad': zero_grad, 'full': full, 'half': half},
                   tolerance='exact at float64')


def check_mixture_concentration(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    stages = {s.name: s for s in builtin_stages(cfg.budget_scale)}
    p2 = stages['P2']
    rng = np.random.default_rng(seed)
    keys = draw_keys(p2, 100_000, rng)
    realized = {k: keys.count(k) / len(keys) for k in P2_TARGET_FRACTIONS}
    worst = max(abs(realized[k] - v) for k, v in P2_TARGET_FRACTIONS.items())

    ledger, runtime = MixtureLedger(), StageRuntime(p2)
    threshold = p2.triggers[0].token_count
    fires, fired_at = 0, None
    step = max(1, p2.token_budget // 97)
    while ledger.total < p2.token_budget:
        ledger.add('image', min(step, p2.token_budget - ledger.total))
        fired = advance(ledger, runtime)
        if fired:
            fires += len(fired)
            fired_at = ledger.total
    ok = worst <= 0.005 and fires == 1 and runtime.factors.vision == 1.0 \
        and fired_at is not None and fired_at >= threshold and fired_at - step < threshold
    return _result(7, ok, measured={'fractions': realized, 'max_deviation': worst, 'fires': fires,
                                    'threshold': threshold, 'fired_at': fired_at,
                                    'vision_factor': runtime.factors.vision},
                   tolerance='+-0.005; trigger fires exactly once')


def _random_segments(layout: VocabLayout, rng: np.random.Generator) -> List[Segment]:
    segments = []
    for _ in range(int(rng.integers(1, 6))):
        kind = int(rng.integers(0, 4))
        if kind == 0:
            segments.append(Segment(kind=SegmentKind.TEXT_IDS,
                                    ids=rng.integers(0, layout.text_size, int(rng.integers(1, 12))).tolist()))
        elif kind == 1:
            segments.append(Segment(kind=SegmentKind.VISION_DISCRETE,
                                    ids=rng.integers(0, layout.vision_codebook_size, VISION_SPAN_LENGTH).tolist()))
        elif kind == 2:
            segments.append(Segment(kind=SegmentKind.AUDIO_DISCRETE,
                                    ids=rng.integers(0, layout.audio_codebook_size, int(rng.integers(1, 30))).tolist()))
        else:
            modality = SegmentKind.VISION_CONTINUOUS if rng.integers(0, 2) else SegmentKind.AUDIO_CONTINUOUS
            segments.append(Segment(kind=modality, length=int(rng.integers(1, 40))))
    return segments


def check_interleave_integrity(cfg: RunConfig, seed: int, root: Optional[Path],
                               cases: int = 10_000, seeds: int = 1000) -> CheckResult:
    layout = layout_from_config(cfg.vocab)
    rng = np.random.default_rng(seed)
    vs, ve = int(layout.special(prompts.VISION_START)), int(layout.special(prompts.VISION_END))
    slot_targeted = bad_spans = 0
    for _ in range(cases):
        item = assemble(_random_segments(layout, rng), layout)
        slots = item.slot_mask[1:]
        if bool((item.targets[slots] != IGNORE_INDEX).any()) or bool((item.weights[slots] != 0).any()):
            slot_targeted += 1
        ids = item.input_ids.tolist()
        start = None
        for pos, token in enumerate(ids):
            if token == vs:
                start = pos
            elif token == ve and start is not None:
                if not bool(item.slot_mask[start + 1:pos].any()) and pos - start - 1 != VISION_SPAN_LENGTH:
                    bad_spans += 1
                start = None

    sampler = ConstrainedSampler(layout)
    vision, audio = layout.region_mask(Region.VISION), layout.region_mask(Region.AUDIO)
    violations = 0
    for s in range(seeds):
        generator = torch.Generator().manual_seed(s)
        mode = list(SamplerMode)[s % len(SamplerMode)]
        state = SamplerState(mode=mode, vision_count=(VISION_SPAN_LENGTH - 3) if s % 2 else 0,
                             audio_target=5 if s % 3 == 0 else None)
        for _ in range(24):
            logits = torch.randn(layout.total, generator=generator, dtype=torch.float64)
            allowed = sampler.permitted(state)
            try:
                token = sampler.choose(logits, state, generator)
            except AssertionError:
                violations += 1
                break
            region_ok = True
            if state.mode is SamplerMode.VISION_SPAN and state.vision_count < VISION_SPAN_LENGTH:
                region_ok = bool(vision[token])
            elif state.mode is SamplerMode.FREE:
                region_ok = not bool(vision[token] or audio[token])
            if not bool(allowed[token]) or not region_ok:
                violations += 1
            sampler.advance(state, token)
    ok = slot_targeted == 0 and bad_spans == 0 and violations == 0
    return _result(8, ok, measured={'cases': cases, 'slot_targeted': slot_targeted, 'bad_vision_spans': bad_spans,
                                    'sampler_seeds': seeds, 'sampler_violations': violations},
                   tolerance='zero violations')


def check_autoguidance_identity(cfg: RunConfig, seed: int, root: Optional[Path]) -> CheckResult:
    torch.manual_seed(seed)
    dcfg = cfg.vision_decoder
    main = build_decoder(dcfg, cfg.vision_tokenizer.feature_dim)
    bad = build_decoder(dcfg, cfg.vision_tokenizer.feature_dim, bad=True)
    _perturb(main, 0.05, seed)
    _perturb(bad, 0.05, seed + 1)
    cond = CondGrid(values=torch.randn(cfg.vision_tokenizer.feature_dim, 6, 6))
    plain = sample_latent(main, cond, 3, GuidanceConfig(scale=1.0, bad_model=None), seed=seed)
    with_bad = sample_latent(main, cond, 3, GuidanceConfig(scale=1.0, bad_model=bad), seed=seed)
    guided = sample_latent(main, cond, 3, GuidanceConfig(scale=dcfg.guidance_scale, bad_model=bad), seed=seed)
    identical = bool(torch.equal(plain, with_bad))
    bad_steps = max(1, int(round(dcfg.steps * dcfg.bad_step_fraction)))
    ok = identical and bool(torch.isfinite(guided).all()) and not torch.equal(guided, plain) \
        and count_parameters(bad) < count_parameters(main)
    return _result(11, ok, measured={'s1_bit_identical': identical, 'guided_scale': dcfg.guidance_scale,
                                     'bad_steps': bad_steps, 'main_steps': dcfg.steps},
                   tolerance='bit-identical at s = 1')


# ---------------------------------------------------------------------------
# e2e
# ---------------------------------------------------------------------------

def _training(cfg: RunConfig, root: Path):
    from training_service import TrainingService
    return TrainingService(cfg, root)


def pixel_reconstruction(decoder, grid, pixels: torch.Tensor, seed: int) -> torch.Tensor:
    """Decode a token grid back onto the exact pixel grid of its source image"""
    size = (int(pixels.shape[2]), int(pixels.shape[1]))
    decoded = decoder.decode_grid(grid, original_size=size, seed=seed)
    if decoded.shape != pixels.shape:
        decoded = resize_pixels(decoded, tuple(pixels.shape[1:]))
    return decoded


def check_overfit_oracles(cfg: RunConfig, seed: int, root: Path) -> CheckResult:
    service = _training(cfg, root)
    comps = service.components()
    corpus = service.corpus
    count = min(16, len(corpus.images))
    images = [corpus.pixels(i) for i in range(count)]
    decoder = comps.vision_decoder()
    factor = cfg.vision_decoder.latent_factor
    scores, latent_scores = [], []
    for index, pixels in enumerate(images):
        grid = comps.vision_tokenizer.tokenize_any(ImageBuffer(pixels=pixels))
        decoded = pixel_reconstruction(decoder, grid, pixels, seed=seed + index)
        scores.append(psnr(decoded, pixels))
        latent_scores.append(psnr(encode_latent(decoded, factor), encode_latent(pixels, factor)))
    mean_psnr = float(np.mean(scores))

    clips = []
    for clip in corpus.clips[:8]:
        wave = corpus.wave(clip.file)
        clips.append((comps.audio_tokenizer.tokenize(wave), wave, comps.speaker_encoder(wave)))
    torch.manual_seed(seed)
    generator = UnitGenerator(cfg.vocoder, cfg.fsq.codebook_size)
    losses = train_vocoder(generator, clips, min(1000, cfg.vocoder.steps), cfg.vocoder.lr, seed=seed)
    drop = 1.0 - losses[-1] / losses[0]
    ok = mean_psnr >= 25.0 and cfg.vision_decoder.steps <= 2000 and drop >= 0.5
    return _result(12, ok, measured={'decoder_psnr_db': mean_psnr, 'latent_psnr_db': float(np.mean(latent_scores)),
                                     'images': count, 'decoder_steps': cfg.vision_decoder.steps,
                                     'vocoder_loss_drop': drop, 'vocoder_steps': len(losses)},
                   tolerance='pixel PSNR >= 25 dB; vocoder loss falls >= 50%')


def check_conditioning_comparison(cfg: RunConfig, seed: int, root: Path, steps: int = 200) -> CheckResult:
    service = _training(cfg, root)
    comps = service.components()
    corpus = service.corpus
    examples = prepare_examples(comps.vision_tokenizer, [corpus.pixels(i) for i in range(min(16, len(corpus.images)))])
    torch.manual_seed(seed)
    concat = build_decoder(cfg.vision_decoder, cfg.vision_tokenizer.feature_dim)
    torch.manual_seed(seed)
    attention = build_decoder(cfg.vision_decoder, cfg.vision_tokenizer.feature_dim, attention_conditioned=True)
    ratio = count_parameters(attention) / count_parameters(concat)
    train_decoder(concat, examples, steps, cfg.vision_decoder.lr, seed=seed, desc='concat')
    train_decoder(attention, examples, steps, cfg.vision_decoder.lr, seed=seed, desc='attention')
    concat_loss = validation_loss(concat, examples, seed=seed + 1)
    attention_loss = validation_loss(attention, examples, seed=seed + 1)
    directional = concat_loss <= attention_loss
    asserted = seed == SHIPPED_SEED
    ok = (directional or not asserted) and abs(ratio - 1.0) <= 0.10
    return _result(13, ok, measured={'channel_concat': concat_loss, 'attention': attention_loss,
                                     'parameter_ratio': ratio, 'asserted': asserted},
                   tolerance='concat <= attention on the shipped seed; parameters within 10%',
                   detail='' if asserted else 'reported only: not the shipped seed')


def check_end_to_end(cfg: RunConfig, seed: int, root: Path) -> CheckResult:
    from generation_service import GenerationService, PromptSpec
    for name in STAGE_ORDER:
        require_checkpoint(root, name)
    service = GenerationService(cfg, root, stage=STAGE_ORDER[-1])
    out_dir = root / 'eval'
    tokenizer = service.components.vision_tokenizer

    image_out = service.generate(PromptSpec(task='t2i', turns=[{'role': 'user', 'content': [
        {'text': prompts.T2I_PROMPT.format(caption='a red circle labeled AB')}]}]),
        modality_out='image', out_dir=out_dir / 'image', seed=seed)
    image_ids = []
    if image_out.images:
        grid = tokenizer.tokenize_any(ImageBuffer(pixels=load_png(image_out.images[0])))
        image_ids = grid.flat()
    image_ok = len(image_ids) == VISION_SPAN_LENGTH and all(0 <= i < tokenizer.cfg.codebook_size for i in image_ids)

    audio_out = service.generate(PromptSpec(task='tts', audio_seconds=2.0, turns=[{'role': 'user', 'content': [
        {'text': prompts.TTS_PROMPT.format(text='one two three')}]}]),
        modality_out='audio', out_dir=out_dir / 'audio', seed=seed)
    samples = int(load_wav(audio_out.audio[0], cfg.vocoder.sample_rate).shape[0]) if audio_out.audio else 0
    expected = int(round(2.0 * cfg.vocoder.token_rate)) * cfg.vocoder.hop_length

    # informational: decode -> re-tokenize agreement on training images
    corpus = service.training.corpus
    decoder = service.components.vision_decoder()
    agreement = []
    for index in range(min(4, len(corpus.images))):
        grid = tokenizer.tokenize_any(ImageBuffer(pixels=corpus.pixels(index)))
        decoded = decoder.decode_grid(grid, seed=seed)
        again = tokenizer.tokenize_any(ImageBuffer(pixels=decoded))
        agreement.append(float((again.ids == grid.ids).double().mean()))

    ok = image_ok and samples == expected
    return _result(14, ok, measured={'image_ids': len(image_ids), 'wav_samples': samples,
                                     'expected_samples': expected,
                                     'retokenize_agreement': float(np.mean(agreement)) if agreement else None},
                   tolerance='729 valid ids; exact WAV length')


CHECKS: Dict[int, Callable[..., CheckResult]] = {
    1: check_fsq_bijection,
    2: check_fsq_anchors,
    3: check_gradients_suite,
    4: check_mtp_composition,
    5: check_freeze_policy,
    6: check_loss_masking,
    7: check_mixture_concentration,
    8: check_interleave_integrity,
    9: check_rate_algebra,
    10: check_conditioning_geometry,
    11: check_autoguidance_identity,
    12: check_overfit_oracles,
    13: check_conditioning_comparison,
    14: check_end_to_end,
}


def run_suite(suite: str, cfg: RunConfig, seed: int, root: Optional[Path] = None) -> EvalReport:
    """
    Run one suite; a missing checkpoint for e2e raises CheckpointError
    instead of producing a failure report
    """
    if suite not in SUITES:
        raise UsageError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    if suite == 'e2e':
        if root is None:
            raise UsageError("the e2e suite needs a run directory")
        require_checkpoint(root, STAGE_ORDER[-1])

    report = EvalReport(suite=suite, seed=seed, environment=environment_fingerprint())
    for criterion, name in CRITERIA.items():
        report.checks[criterion] = CheckResult(criterion=criterion, name=name)

    logger.info("=" * 60)
    logger.info(f"Eval suite '{suite}' (seed {seed})")
    logger.info("=" * 60)
    for criterion in SUITES[suite]:
        torch.manual_seed(seed)
        started = time.time()
        try:
            result = CHECKS[criterion](cfg, seed, root)
        except CheckpointError:
            raise
        except Exception as e:
            logger.error(f"check {criterion} ({CRITERIA[criterion]}) raised: {e}", exc_info=True)
            result = _result(criterion, False, detail=f"{type(e).__name__}: {e}")
        result.seconds = time.time() - started
        report.checks[criterion] = result
        marker = '✓' if result.passed else '✗'
        logger.info(f"  {marker} [{criterion}] {result.name}: {result.status} ({result.seconds:.1f}s)")
    return report
