import pytest
import torch

import prompts
from config import LossError, MtpConfig, SamplerConfig, ShapeError, VocabError
from interleave_service import Segment, SegmentKind, assemble
from models.backbone import (
    IGNORE_INDEX, VISION_SPAN_LENGTH, ConstrainedSampler, OmniBackbone, SamplerMode, SamplerState,
    backbone_loss, combine_losses, generate, weighted_ce,
)
from models.base import ModalityDecoder
from modality_vocab import Region
from utils.gradcheck import check_gradients


def _model(cfg, layout, mtp=None):
    torch.manual_seed(0)
    return OmniBackbone(cfg.backbone, layout.total, mtp)


def test_forward_shapes(tiny_cfg, layout):
    model = _model(tiny_cfg, layout, MtpConfig())
    ids = torch.randint(0, layout.total, (2, 10))
    out = model(ids)
    assert out.logits.shape == (2, 10, layout.total)
    assert out.mtp_logits.shape == (2, 10, layout.total)
    assert out.hidden.shape == (2, 10, tiny_cfg.backbone.hidden)


def test_forward_rejects_bad_input(tiny_cfg, layout):
    model = _model(tiny_cfg, layout)
    with pytest.raises(VocabError):
        model(torch.tensor([[layout.total]]))
    with pytest.raises(ShapeError):
        model(torch.zeros(2 * model.context_limit, dtype=torch.long).view(1, -1))
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 4, dtype=torch.long), None, torch.ones(1, 4, dtype=torch.bool))


def test_injection_replaces_slot_embeddings(tiny_cfg, layout):
    model = _model(tiny_cfg, layout)
    ids = torch.zeros(1, 4, dtype=torch.long)
    mask = torch.tensor([[False, True, False, False]])
    values = torch.zeros(1, 4, tiny_cfg.backbone.hidden)
    values[0, 1] = 3.0
    x = model.embed(ids, values, mask)
    assert torch.equal(x[0, 1], values[0, 1])
    assert torch.equal(x[0, 0], model.embedding.weight[0])


def test_attention_is_causal(tiny_cfg, layout):
    model = _model(tiny_cfg, layout).eval()
    ids = torch.randint(0, layout.total, (1, 8))
    changed = ids.clone()
    changed[0, -1] = (int(ids[0, -1]) + 1) % layout.total
    with torch.no_grad():
        a, b = model(ids).logits, model(changed).logits
    assert torch.allclose(a[0, :-1], b[0, :-1], atol=1e-6)


def test_loss_is_main_plus_weighted_aux(tiny_cfg, layout):
    mtp = MtpConfig(enabled=True, weight=0.2)
    model = _model(tiny_cfg, layout, mtp).double()
    ids = torch.randint(0, layout.total, (2, 9))
    weights = torch.ones(2, 8, dtype=torch.float64)
    out = model(ids)
    loss = backbone_loss(out.logits, out.mtp_logits, ids[:, 1:], weights, mtp)
    assert float(loss.total) == pytest.approx(float(loss.main) + 0.2 * float(loss.aux), rel=1e-12)
    assert float(loss.aux) > 0

    off = backbone_loss(out.logits, out.mtp_logits, ids[:, 1:], weights, MtpConfig(enabled=False))
    assert float(off.total) == float(off.main)


def test_weighted_ce_errors_and_masking():
    logits = torch.randn(1, 3, 5)
    targets = torch.tensor([[1, IGNORE_INDEX, 2]])
    with pytest.raises(LossError):
        weighted_ce(logits, targets, torch.zeros(1, 3))
    with pytest.raises(ShapeError):
        weighted_ce(logits, targets, torch.ones(1, 2))
    with pytest.raises(LossError):
        combine_losses(torch.tensor(1.0), torch.tensor(1.0), -0.1)
    # ignored positions contribute nothing even with a large weight
    a = weighted_ce(logits, targets, torch.tensor([[1.0, 100.0, 1.0]]))
    b = weighted_ce(logits, targets, torch.tensor([[1.0, 0.0, 1.0]]))
    assert float(a) == pytest.approx(float(b))


def test_backbone_gradients_match_central_differences(tiny_cfg, layout):
    cfg = tiny_cfg
    cfg.backbone.layers = 1
    mtp = MtpConfig(enabled=True)
    model = _model(cfg, layout, mtp).double()
    ids = torch.randint(0, layout.total, (1, 6))
    weights = torch.rand(1, 5, dtype=torch.float64) + 0.5

    def loss_fn():
        out = model(ids)
        return backbone_loss(out.logits, out.mtp_logits, ids[:, 1:], weights, mtp).total

    result = check_gradients(loss_fn, list(model.named_parameters()), num_samples=50)
    assert result.checked == 50
    assert result.passed(1e-4), result


def test_parameter_groups_cover_every_parameter(tiny_cfg, layout):
    model = _model(tiny_cfg, layout, MtpConfig())
    groups = model.parameter_groups(prefix='backbone.')
    names = {n for g in groups.values() for n in g}
    assert names == {'backbone.' + n for n, _ in model.named_parameters()}
    assert set(groups) == {'embedding', 'output_head', 'decoder_layers', 'mtp_layers', 'mtp_output_head'}


def test_sampler_vision_span_is_exactly_729(layout):
    sampler = ConstrainedSampler(layout)
    state = SamplerState(mode=SamplerMode.VISION_SPAN)
    vision = layout.region_mask(Region.VISION)
    for _ in range(VISION_SPAN_LENGTH):
        assert torch.equal(sampler.permitted(state), vision)
        sampler.advance(state, layout.offset(Region.VISION))
    allowed = sampler.permitted(state)
    assert int(allowed.sum()) == 1 and bool(allowed[layout.special(prompts.VISION_END)])
    assert sampler.advance(state, layout.special(prompts.VISION_END)) == 'image'
    assert state.mode is SamplerMode.FREE


def test_sampler_audio_target_and_free_mode(layout):
    sampler = ConstrainedSampler(layout)
    state = SamplerState(mode=SamplerMode.AUDIO_SPAN, audio_target=2)
    audio_end = layout.special(prompts.AUDIO_END)
    assert not bool(sampler.permitted(state)[audio_end])
    sampler.advance(state, layout.offset(Region.AUDIO))
    sampler.advance(state, layout.offset(Region.AUDIO))
    assert int(sampler.permitted(state).sum()) == 1

    free = sampler.permitted(SamplerState())
    assert not bool(free[layout.offset(Region.VISION)])
    assert not bool(free[layout.special(prompts.THINK_CLOSE)])
    assert bool(free[layout.special(prompts.THINK_OPEN)])
    think = sampler.permitted(SamplerState(mode=SamplerMode.THINK))
    assert bool(think[layout.special(prompts.THINK_CLOSE)])
    assert not bool(think[layout.offset(Region.AUDIO)])


def test_choose_never_leaves_the_permitted_set(layout):
    sampler = ConstrainedSampler(layout)
    generator = torch.Generator().manual_seed(0)
    for mode in SamplerMode:
        for temperature, top_k in ((1.0, 0), (0.7, 5), (0.0, 0)):
            state = SamplerState(mode=mode, temperature=temperature, top_k=top_k)
            token = sampler.choose(torch.randn(layout.total, generator=generator), state, generator)
            assert bool(sampler.permitted(state)[token])


def test_state_after_prompt_resumes_open_span(layout):
    sampler = ConstrainedSampler(layout)
    item = assemble([Segment(kind=SegmentKind.TEXT_IDS, ids=[1]),
                     Segment(kind=SegmentKind.AUDIO_DISCRETE, ids=[3, 4])], layout, close_last_span=False)
    state = sampler.state_after_prompt(item.input_ids.tolist(), SamplerState())
    assert state.mode is SamplerMode.AUDIO_SPAN
    assert state.audio_count == 2


class _RecordingDecoder(ModalityDecoder):
    modality = 'image'

    def __init__(self):
        self.calls = []

    def decode_span(self, local_ids, seed=0, context=None):
        self.calls.append((list(local_ids), context))
        return torch.zeros(3, 2, 2)


@pytest.mark.slow
def test_generate_image_span_reaches_decoder(tiny_cfg, layout):
    model = _model(tiny_cfg, layout)
    model.context_limit = 1024
    prompt = assemble([Segment(kind=SegmentKind.TEXT_IDS, ids=[1, 2])], layout).input_ids
    prompt = torch.cat([prompt, torch.tensor([layout.special(prompts.VISION_START)])])
    decoder = _RecordingDecoder()
    state = SamplerState.from_config(SamplerConfig(temperature=1.0))
    result = generate(model, layout, prompt, state, VISION_SPAN_LENGTH + 1, seed=3,
                      decoders={'image': decoder}, decoder_context={'image': {'original_size': (8, 4)}})
    assert len(result.tokens) == VISION_SPAN_LENGTH + 1
    assert result.tokens[-1] == layout.special(prompts.VISION_END)
    assert len(result.spans) == 1 and len(result.spans[0].local_ids) == VISION_SPAN_LENGTH
    assert all(0 <= i < layout.vision_codebook_size for i in result.spans[0].local_ids)
    assert decoder.calls[0][1] == {'original_size': (8, 4)}


def test_generate_is_seed_deterministic(tiny_cfg, layout):
    model = _model(tiny_cfg, layout)
    prompt = torch.tensor([layout.special(prompts.TURN_START), layout.offset(Region.TEXT) + 5])
    runs = [generate(model, layout, prompt, SamplerState(temperature=1.0), 12, seed=9).tokens for _ in range(2)]
    assert runs[0] == runs[1]
