import math

import numpy as np
import pytest
import torch

from config import ShapeError, VisionDecoderConfig, VisionTokenizerConfig
from models.vision_decoder import (
    AttentionConditionedDiT, ChannelConcatDiT, CondGrid, GuidanceConfig, VisionDecoder, build_decoder,
    count_parameters, decode_latent, encode_latent, features_to_cond, phase_batch, phase_schedule,
    phase_steps, prepare_examples, psnr, rectified_flow_loss, sample_latent, tokens_to_cond,
    train_decoder, validation_loss,
)
from models.vision_tokenizer import VisionTokenGrid, VisionTokenizer
from utils.coordinate_utils import token_aligned_crop


def _tokenizer():
    return VisionTokenizer(VisionTokenizerConfig(feature_dim=16, codebook_size=32))


def _decoder_cfg():
    return VisionDecoderConfig(width=32, blocks=2, heads=2, bad_width=16, bad_blocks=1,
                               sample_steps=3, output_size=64)


def _perturbed(model, seed=1):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=generator))
    return model


def _grid(seed=0):
    generator = torch.Generator().manual_seed(seed)
    return VisionTokenGrid(ids=torch.randint(0, 32, (27, 27), generator=generator), codebook_size=32)


def test_latent_codec_rounds_up_and_restores_size():
    pixels = torch.rand(3, 60, 100)
    latent = encode_latent(pixels)
    assert tuple(latent.shape) == (3, 8, 13)
    assert tuple(decode_latent(latent, (60, 100)).shape) == (3, 60, 100)


def test_psnr_of_identical_images_is_infinite():
    x = torch.rand(3, 8, 8)
    assert psnr(x, x) == float('inf')
    assert math.isfinite(psnr(x, x.clamp(0, 0.5)))


def test_tokens_to_cond_matches_latent_shape():
    cond = tokens_to_cond(_tokenizer(), _grid(), (78, 116))
    assert cond.spatial == (78, 116)
    assert cond.values.shape[0] == 16


def test_features_to_cond_rejects_empty_target():
    with pytest.raises(ShapeError):
        features_to_cond(torch.rand(16, 27, 27), (0, 4))


@pytest.mark.parametrize('cls', [ChannelConcatDiT, AttentionConditionedDiT])
def test_dit_output_matches_latent_for_odd_sizes(cls):
    model = cls(latent_channels=3, cond_channels=16, width=32, blocks=1, heads=2)
    out = model(torch.rand(2, 3, 9, 13), torch.rand(2), torch.rand(2, 16, 9, 13))
    assert tuple(out.shape) == (2, 3, 9, 13)
    with pytest.raises(ShapeError):
        model(torch.rand(1, 3, 9, 13), torch.rand(1), torch.rand(1, 16, 8, 13))


def test_baseline_conditioner_has_comparable_size():
    cfg = _decoder_cfg()
    concat = count_parameters(build_decoder(cfg, 16))
    attention = count_parameters(build_decoder(cfg, 16, attention_conditioned=True))
    assert abs(concat - attention) / concat < 0.10


def test_bad_model_is_smaller():
    cfg = _decoder_cfg()
    assert count_parameters(build_decoder(cfg, 16, bad=True)) < count_parameters(build_decoder(cfg, 16))


def test_rectified_flow_loss_shape_errors():
    model = build_decoder(_decoder_cfg(), 16)
    x0 = torch.rand(1, 3, 8, 8)
    with pytest.raises(ShapeError):
        rectified_flow_loss(model, x0, torch.rand(1, 16, 8, 8), torch.rand(1), torch.rand(1, 3, 8, 9))
    with pytest.raises(ShapeError):
        rectified_flow_loss(model, x0, torch.rand(1, 16, 4, 4), torch.rand(1), torch.rand(1, 3, 8, 8))


def test_zero_initialised_decoder_predicts_zero_velocity():
    model = build_decoder(_decoder_cfg(), 16)
    x0 = torch.rand(2, 3, 8, 8)
    noise = torch.randn(2, 3, 8, 8)
    loss = rectified_flow_loss(model, x0, torch.rand(2, 16, 8, 8), torch.rand(2), noise)
    assert float(loss) == pytest.approx(float(((noise - x0) ** 2).mean()), rel=1e-5)


def test_phase_schedule_and_step_split():
    assert [phase_schedule(p).name for p in range(1, 5)] == [
        'low_res_crops', 'full_res_crops', 'full_images', 'refinement'
    ]
    assert phase_schedule(4).lr_scale == pytest.approx(0.1)
    with pytest.raises(ShapeError):
        phase_schedule(5)
    for total in (1, 7, 40, 1000):
        assert sum(phase_steps(total)) == total


def test_token_aligned_crop_stays_on_grid():
    rng = np.random.default_rng(0)
    for _ in range(50):
        window = token_aligned_crop(rng, 27, 12, 8)
        assert 0 <= window.tokens.x0 and window.tokens.x1 <= 27
        assert window.pixels.x0 == window.tokens.x0 * 8
        assert window.pixels.width == 96
    with pytest.raises(ShapeError):
        token_aligned_crop(rng, 27, 28, 8)


def test_phase_batch_shapes():
    examples = prepare_examples(_tokenizer(), [torch.rand(3, 48, 64) for _ in range(3)])
    rng = np.random.default_rng(0)
    latents, cond, windows = phase_batch(examples, phase_schedule(1), rng)
    assert tuple(latents.shape) == (3, 3, 8, 8)
    assert tuple(cond.shape) == (3, 16, 8, 8)
    assert all(w.tokens.width == 16 for w in windows)
    latents, cond, windows = phase_batch(examples, phase_schedule(3), rng)
    assert tuple(latents.shape[-2:]) == (12, 12)
    assert windows == [None, None, None]


def test_guidance_scale_one_skips_bad_model():
    cfg = _decoder_cfg()
    main = _perturbed(build_decoder(cfg, 16))
    cond = CondGrid(values=torch.rand(16, 6, 6))
    plain = sample_latent(main, cond, 3, GuidanceConfig(scale=1.0, bad_model=None), seed=4)
    with_bad = sample_latent(main, cond, 3, GuidanceConfig(scale=1.0, bad_model=build_decoder(cfg, 16, bad=True)), seed=4)
    assert torch.equal(plain, with_bad)


def test_guidance_with_identical_models_is_a_no_op():
    main = _perturbed(build_decoder(_decoder_cfg(), 16))
    cond = CondGrid(values=torch.rand(16, 6, 6))
    plain = sample_latent(main, cond, 3, GuidanceConfig(scale=1.0), seed=2)
    guided = sample_latent(main, cond, 3, GuidanceConfig(scale=2.5, bad_model=main), seed=2)
    assert torch.allclose(plain, guided, atol=1e-5)


def test_guidance_without_bad_model_is_an_error():
    main = build_decoder(_decoder_cfg(), 16)
    with pytest.raises(ShapeError):
        sample_latent(main, CondGrid(values=torch.rand(16, 4, 4)), 2, GuidanceConfig(scale=1.75))
    with pytest.raises(ShapeError):
        sample_latent(main, CondGrid(values=torch.rand(16, 4, 4)), 0, GuidanceConfig(scale=1.0))


def test_decode_restores_recorded_aspect():
    cfg = _decoder_cfg()
    decoder = VisionDecoder(_tokenizer(), build_decoder(cfg, 16), cfg, bad=build_decoder(cfg, 16, bad=True))
    pixels = decoder.decode_grid(_grid(), original_size=(100, 60), steps=1)
    assert tuple(pixels.shape) == (3, 60, 100)
    assert float(pixels.min()) >= 0.0 and float(pixels.max()) <= 1.0


def test_decode_span_reads_context():
    cfg = _decoder_cfg()
    decoder = VisionDecoder(_tokenizer(), build_decoder(cfg, 16), cfg)
    ids = _grid(3).flat()
    pixels = decoder.decode_span(ids, seed=0, context={'original_size': (40, 24), 'steps': 1, 'guidance_scale': 1.0})
    assert tuple(pixels.shape) == (3, 24, 40)
    square = decoder.decode_span(ids, seed=0, context={'steps': 1, 'guidance_scale': 1.0})
    assert tuple(square.shape) == (3, 64, 64)
    with pytest.raises(ShapeError):
        decoder.decode_span(ids[:-1], context={'steps': 1, 'guidance_scale': 1.0})


def test_train_decoder_lowers_validation_loss():
    examples = prepare_examples(_tokenizer(), [torch.rand(3, 64, 64) * 0.2 + 0.6 for _ in range(4)])
    model = build_decoder(_decoder_cfg(), 16)
    before = validation_loss(model, examples)
    losses = train_decoder(model, examples, total_steps=30, lr=3e-3, seed=0, batch_size=4)
    assert len(losses) == 30
    assert all(math.isfinite(v) for v in losses)
    assert validation_loss(model, examples) < before


def test_train_decoder_needs_examples():
    with pytest.raises(ShapeError):
        train_decoder(build_decoder(_decoder_cfg(), 16), [], total_steps=1, lr=1e-3)
