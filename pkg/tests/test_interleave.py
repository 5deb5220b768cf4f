import json

import pytest
import torch

import prompts
from config import ShapeError, TemplateError, VocabError
from interleave_service import (
    MaskFactors, Role, Segment, SegmentKind, Turn, assemble, collate, control_segment, dump_jsonl,
    generation_prefix, loss_weights_histogram, render_template, span_report, text_segment,
)
from modality_vocab import REGION_ORDER, ByteTokenizer, Region
from models.backbone import IGNORE_INDEX, VISION_SPAN_LENGTH


@pytest.fixture
def tokenizer(tiny_cfg):
    return ByteTokenizer(tiny_cfg.vocab.text_size)


def _vision(value=0):
    return Segment(kind=SegmentKind.VISION_DISCRETE, ids=[value] * VISION_SPAN_LENGTH)


def test_text_and_vision_sequence_layout(layout):
    item = assemble([Segment(kind=SegmentKind.TEXT_IDS, ids=[1, 2, 3]), _vision(5)], layout)
    text_offset = layout.offset(Region.TEXT)
    assert item.input_ids[:3].tolist() == [text_offset + 1, text_offset + 2, text_offset + 3]
    assert int(item.input_ids[3]) == layout.special(prompts.VISION_START)
    assert int(item.input_ids[-1]) == layout.special(prompts.VISION_END)
    assert len(item) == 3 + VISION_SPAN_LENGTH + 2
    assert item.targets.tolist() == item.input_ids[1:].tolist()
    assert span_report(item, layout) == [('vision', VISION_SPAN_LENGTH, 0)]


def test_slots_are_never_targets(layout):
    segments = [
        Segment(kind=SegmentKind.TEXT_IDS, ids=[4]),
        Segment(kind=SegmentKind.AUDIO_CONTINUOUS, length=7),
        Segment(kind=SegmentKind.TEXT_IDS, ids=[5, 6]),
    ]
    item = assemble(segments, layout)
    assert int(item.slot_mask.sum()) == 7
    slots = item.slot_mask[1:]
    assert bool((item.targets[slots] == IGNORE_INDEX).all())
    assert bool((item.weights[slots] == 0).all())
    assert item.slot_spans[0].start == 2 and item.slot_spans[0].length == 7


def test_mask_factors_weight_each_region(layout):
    segments = [Segment(kind=SegmentKind.TEXT_IDS, ids=[1, 2]), _vision(),
                Segment(kind=SegmentKind.AUDIO_DISCRETE, ids=[3, 4, 5])]
    item = assemble(segments, layout, MaskFactors(text=1.0, vision=0.5, audio=0.0))
    sums = loss_weights_histogram(item, layout)
    assert sums['vision'] == pytest.approx(0.5 * VISION_SPAN_LENGTH)
    assert sums['audio'] == 0.0
    assert sums['text'] == pytest.approx(1.0)
    # control tokens count as text-weighted targets
    assert sums['specials'] == pytest.approx(4.0)


def test_negative_factor_rejected():
    with pytest.raises(ShapeError):
        MaskFactors(vision=-1.0)


def test_ids_outside_region_rejected(layout):
    with pytest.raises(VocabError):
        assemble([Segment(kind=SegmentKind.TEXT_IDS, ids=[layout.text_size])], layout)
    with pytest.raises(ShapeError):
        Segment(kind=SegmentKind.VISION_DISCRETE, ids=[0] * 10)
    with pytest.raises(ShapeError):
        Segment(kind=SegmentKind.VISION_CONTINUOUS)


def test_edit_pair_shares_one_span(layout):
    segments = [Segment(kind=SegmentKind.VISION_CONTINUOUS, length=9, edit_pair=True), _vision(1)]
    item = assemble(segments, layout)
    assert span_report(item, layout) == [('vision', VISION_SPAN_LENGTH, 9)]
    with pytest.raises(ShapeError):
        assemble([Segment(kind=SegmentKind.VISION_CONTINUOUS, length=9, edit_pair=True)], layout)


def test_render_template_wraps_turns_and_think(layout, tokenizer):
    turns = [Turn(Role.USER, [text_segment(tokenizer, "hi")]),
             Turn(Role.ASSISTANT, [text_segment(tokenizer, "yo")])]
    segments = render_template(turns, layout, tokenizer, think='vqa')
    item = assemble(segments, layout)
    ids = item.input_ids.tolist()
    sp = layout.special
    assert ids[:2] == [sp(prompts.TURN_START), sp(prompts.ROLE_TOKENS['user'])]
    assert ids.count(sp(prompts.TURN_END)) == 2
    think_open = ids.index(sp(prompts.THINK_OPEN))
    assert ids[think_open - 1] == sp(prompts.ROLE_TOKENS['assistant'])
    body = ids[think_open + 1:ids.index(sp(prompts.THINK_CLOSE))]
    offset = layout.offset(Region.TEXT)
    assert tokenizer.decode([t - offset for t in body]) == prompts.INTENT_THINK['vqa']


def test_template_errors(layout, tokenizer):
    user = Turn(Role.USER, [text_segment(tokenizer, "a")])
    with pytest.raises(TemplateError):
        render_template([user], layout, tokenizer, think="x")
    with pytest.raises(TemplateError):
        render_template([user, Turn(Role.USER, [])], layout, tokenizer)
    with pytest.raises(TemplateError):
        render_template([user, Turn(Role.SYSTEM, [])], layout, tokenizer)
    with pytest.raises(TemplateError):
        Turn('narrator', [])
    with pytest.raises(TemplateError):
        render_template([], layout, tokenizer, think="x")


def test_target_roles_supervise_assistant_only(layout, tokenizer):
    turns = [Turn(Role.USER, [text_segment(tokenizer, "question")]),
             Turn(Role.ASSISTANT, [text_segment(tokenizer, "answer")])]
    item = assemble(render_template(turns, layout, tokenizer), layout, target_roles={Role.ASSISTANT})
    ids = item.input_ids.tolist()
    assistant_start = ids.index(layout.special(prompts.ROLE_TOKENS['assistant'])) - 1
    assert bool((item.weights[:assistant_start - 1] == 0).all())
    assert float(item.weights[assistant_start:].sum()) > 0


def test_generation_prefix_leaves_span_open(layout):
    prefix = generation_prefix(layout, 'image')
    item = assemble([Segment(kind=SegmentKind.TEXT_IDS, ids=[1]), prefix], layout)
    assert int(item.input_ids[-1]) == layout.special(prompts.VISION_START)
    audio = assemble([Segment(kind=SegmentKind.AUDIO_CONTINUOUS, length=3)], layout, close_last_span=False)
    assert int(audio.input_ids[-1]) == layout.special(prompts.SLOT)


def test_collate_pads_and_injects(layout):
    a = assemble([Segment(kind=SegmentKind.TEXT_IDS, ids=[1, 2]),
                  Segment(kind=SegmentKind.AUDIO_CONTINUOUS, embeddings=torch.ones(3, 8))], layout)
    b = assemble([Segment(kind=SegmentKind.TEXT_IDS, ids=[1, 2, 3])], layout)
    batch = collate([a, b], layout, hidden=8)
    assert batch.ids.shape == (2, len(a))
    assert bool((batch.ids[1, len(b):] == layout.special(prompts.PAD)).all())
    assert bool((batch.targets[1, len(b) - 1:] == IGNORE_INDEX).all())
    assert batch.inject_values.shape == (2, len(a), 8)
    assert float(batch.inject_values[0][a.slot_mask].sum()) == 24.0
    assert float(batch.inject_values[1].abs().sum()) == 0.0


def test_inject_values_uses_resolver_and_checks_shape(layout):
    item = assemble([Segment(kind=SegmentKind.VISION_CONTINUOUS, length=4, source='img')], layout)
    values = item.inject_values(6, resolver=lambda span: torch.full((span.length, 6), 2.0))
    assert float(values[item.slot_mask].mean()) == 2.0
    with pytest.raises(ShapeError):
        item.inject_values(6, resolver=lambda span: torch.zeros(3, 6))
    with pytest.raises(ShapeError):
        item.inject_values(6)


def _open_spans(item, layout):
    opens = {int(layout.special(prompts.VISION_START)), int(layout.special(prompts.AUDIO_START))}
    return sum(int(t) in opens for t in item.input_ids.tolist()) - len(span_report(item, layout))


def test_truncate_drops_a_slot_span_it_would_split(layout):
    item = assemble([Segment(kind=SegmentKind.TEXT_IDS, ids=[1] * 5),
                     Segment(kind=SegmentKind.AUDIO_CONTINUOUS, length=10)], layout)
    cut = item.truncate(8)
    assert len(cut) == 5
    assert cut.targets.shape == (4,)
    assert cut.slot_spans == []
    assert not bool(cut.slot_mask.any())
    assert float(cut.inject_values(4).abs().sum()) == 0.0
    assert cut.tags['truncated'] is True


def test_truncate_never_leaves_a_partial_vision_span(layout):
    item = assemble([Segment(kind=SegmentKind.TEXT_IDS, ids=[1] * 5), _vision(3),
                     Segment(kind=SegmentKind.TEXT_IDS, ids=[2] * 4)], layout)
    cut = item.truncate(300)
    assert len(cut) == 5
    assert _open_spans(cut, layout) == 0
    assert not bool((layout.region_of_ids(cut.input_ids) == REGION_ORDER.index(Region.VISION)).any())

    whole = item.truncate(5 + VISION_SPAN_LENGTH + 2 + 1)
    assert span_report(whole, layout) == [('vision', VISION_SPAN_LENGTH, 0)]
    assert _open_spans(whole, layout) == 0


def test_truncate_keeps_earlier_spans_whole(layout):
    item = assemble([Segment(kind=SegmentKind.AUDIO_CONTINUOUS, length=3),
                     Segment(kind=SegmentKind.TEXT_IDS, ids=[1] * 2),
                     Segment(kind=SegmentKind.AUDIO_CONTINUOUS, length=6)], layout)
    cut = item.truncate(9)
    assert len(cut) == 7
    assert [s.length for s in cut.slot_spans] == [3]
    assert int(cut.slot_mask.sum()) == sum(s.length for s in cut.slot_spans)
    assert cut.span_bounds == [(0, 5)]


def test_dump_jsonl_records(layout, tmp_path):
    item = assemble([control_segment(layout, [prompts.TURN_START], Role.USER),
                     Segment(kind=SegmentKind.AUDIO_CONTINUOUS, length=2)], layout)
    path = dump_jsonl([item], tmp_path / 'seq.jsonl')
    record = json.loads(path.read_text(encoding='utf-8').splitlines()[0])
    assert record['ids'] == item.input_ids.tolist()
    assert record['slots'] == [2, 3]
    assert len(record['weights']) == len(item) - 1
