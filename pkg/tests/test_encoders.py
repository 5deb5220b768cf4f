import pytest
import torch

from config import EncoderConfig, FsqConfig, ShapeError
from models.encoders import (
    AudioAdapter, AudioEncoder, AudioTokenizer, TemporalCompressor, TokenBudget, VisionEncoder,
    audio_embedding_count, encode_audio, encode_image, log_mel, vision_embedding_count,
)


def _cfg(**changes):
    cfg = EncoderConfig(audio_width=32, audio_heads=2, vision_width=32)
    for key, value in changes.items():
        setattr(cfg, key, value)
    return cfg


def test_log_mel_rate_is_100_hz():
    cfg = _cfg()
    mel = log_mel(torch.zeros(16000 * 10), cfg)
    assert mel.num_frames == 1000
    assert mel.values.shape == (1000, 128)
    assert mel.frame_rate == 100.0


def test_log_mel_rejects_bad_input():
    with pytest.raises(ShapeError):
        log_mel(torch.zeros(2, 1600), _cfg())
    with pytest.raises(ShapeError):
        log_mel(torch.zeros(0), _cfg())
    with pytest.raises(ShapeError):
        log_mel(torch.zeros(100), _cfg())


def test_audio_rates_compose():
    cfg = _cfg()
    encoder = AudioEncoder(cfg)
    with torch.no_grad():
        embedding = encode_audio(encoder, log_mel(torch.randn(16000 * 10) * 0.1, cfg))
        assert len(embedding) == 250
        assert embedding.rate == 25.0
        adapted = AudioAdapter(cfg.audio_width, 48).adapt(embedding)
        assert adapted.width == 48
        compressed = TemporalCompressor(48).compress(adapted)
    assert len(compressed) == 10
    assert compressed.rate == 1.0


@pytest.mark.parametrize('seconds,expected', [(1.0, 25), (2.0, 50), (0.5, 12), (10.0, 250)])
def test_audio_embedding_count(seconds, expected):
    cfg = _cfg()
    samples = int(seconds * cfg.sample_rate)
    assert audio_embedding_count(samples, cfg) == expected
    assert audio_embedding_count(samples, cfg, compressed=True) == -(-expected // 25)


def test_compressor_handles_partial_window():
    compressor = TemporalCompressor(8, window=25)
    assert compressor(torch.randn(26, 8)).shape == (2, 8)
    assert compressor(torch.randn(3, 8)).shape == (1, 8)
    with pytest.raises(ShapeError):
        compressor(torch.zeros(0, 8))


def test_adapter_rejects_wrong_width():
    with pytest.raises(ShapeError):
        AudioAdapter(32, 16)(torch.zeros(4, 31))


@pytest.mark.parametrize('hw', [(96, 96), (128, 96), (64, 320), (624, 928)])
def test_vision_budget_never_exceeded(hw):
    cfg = _cfg(image_budget=40)
    encoder = VisionEncoder(cfg, hidden=24)
    with torch.no_grad():
        embedding = encode_image(encoder, torch.rand(3, *hw), TokenBudget.from_config(cfg))
    assert 1 <= len(embedding) <= 40
    assert embedding.width == 24
    assert len(embedding) == vision_embedding_count([hw], cfg, 40)


def test_video_budget_is_split_across_frames():
    cfg = _cfg(video_budget=30)
    encoder = VisionEncoder(cfg, hidden=16)
    frames = [torch.rand(3, 64, 96) for _ in range(3)]
    with torch.no_grad():
        embedding = encode_image(encoder, frames, TokenBudget.from_config(cfg), video=True)
    assert len(embedding) <= 30
    assert len(embedding) == vision_embedding_count([(64, 96)] * 3, cfg, 30)


def test_video_frame_limit_and_budget_errors():
    cfg = _cfg(max_video_frames=2)
    encoder = VisionEncoder(cfg, hidden=16)
    with pytest.raises(ShapeError):
        encoder([torch.rand(3, 32, 32)] * 3, 100)
    with pytest.raises(ShapeError):
        encoder([torch.rand(3, 32, 32)] * 2, 1)


def test_audio_tokenizer_emits_25_codes_per_second():
    cfg = _cfg()
    tokenizer = AudioTokenizer(AudioEncoder(cfg), FsqConfig(feature_dim=32))
    codes = tokenizer.tokenize(torch.randn(32000) * 0.1)
    assert codes.shape == (50,)
    assert int(codes.min()) >= 0 and int(codes.max()) < 6561
    loss = tokenizer.reconstruction_loss(torch.randn(16000) * 0.1)
    loss.backward()
    assert tokenizer.fsq.project_in.weight.grad is not None
    assert tokenizer.encoder.conv1.weight.grad is None
