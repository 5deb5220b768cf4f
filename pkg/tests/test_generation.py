import json

import pytest
import torch

import prompts
from config import CheckpointError, UsageError
from generation_service import GenerationService, PromptSpec, latest_stage, load_prompt, render_text, strip_think
from interleave_service import span_report
from modality_vocab import Region
from models.encoders import audio_embedding_count
from training_service import TrainingService, build_components
from utils.media_utils import save_wav
from utils.path_utils import checkpoint_dir


@pytest.fixture
def service(tmp_path, tiny_cfg, corpus):
    training = TrainingService(tiny_cfg, tmp_path, corpus=corpus)
    return GenerationService(tiny_cfg, tmp_path, stage='S4', training=training)


def _mark_checkpoint(root, name):
    directory = checkpoint_dir(root, name)
    directory.mkdir(parents=True)
    (directory / 'manifest.json').write_text('{}')


def test_plain_text_prompt_is_a_chat_turn(tmp_path):
    path = tmp_path / 'prompt.txt'
    path.write_text('hello there\n', encoding='utf-8')
    spec = load_prompt(path)
    assert spec.task == 'chat'
    assert spec.turns == [{'role': 'user', 'content': [{'text': 'hello there'}]}]
    assert spec.base_dir == tmp_path


def test_json_prompt(tmp_path):
    path = tmp_path / 'prompt.json'
    path.write_text(json.dumps({
        'task': 'tts', 'turns': [{'role': 'user', 'content': [{'text': 'say one'}]}],
        'audio_seconds': 1.2, 'original_size': [928, 624], 'speaker_ref': 'voice.wav',
    }))
    spec = load_prompt(path)
    assert spec.task == 'tts'
    assert spec.audio_seconds == pytest.approx(1.2)
    assert spec.original_size == (928, 624)
    assert spec.media_path(spec.speaker_ref) == tmp_path / 'voice.wav'


def test_prompt_errors(tmp_path):
    with pytest.raises(UsageError):
        load_prompt(tmp_path / 'absent.txt')
    empty = tmp_path / 'empty.json'
    empty.write_text('{"task": "chat", "turns": []}')
    with pytest.raises(UsageError):
        load_prompt(empty)


def test_strip_think(layout):
    open_id = int(layout.special(prompts.THINK_OPEN))
    close_id = int(layout.special(prompts.THINK_CLOSE))
    a, b, c, d, e = (layout.offset(Region.TEXT) + i for i in range(5))
    tokens = [a, open_id, b, c, close_id, d, open_id, e]
    assert strip_think(tokens, layout) == [a, d]
    assert strip_think([a, b], layout) == [a, b]


def test_render_text_summarizes_media(layout, corpus):
    tokenizer = corpus.tokenizer()
    text = [layout.offset(Region.TEXT) + t for t in tokenizer.encode('red circle')]
    span = ([int(layout.special(prompts.VISION_START))] + [layout.offset(Region.VISION)] * 3
            + [int(layout.special(prompts.VISION_END))])
    rendered = render_text(text + span, layout, tokenizer)
    assert rendered.startswith('red circle')
    assert '[3 vision ids]' in rendered
    assert rendered.endswith(prompts.VISION_END)


def test_latest_stage_prefers_main_ladder(tmp_path):
    with pytest.raises(CheckpointError):
        latest_stage(tmp_path)
    _mark_checkpoint(tmp_path, 'T3')
    assert latest_stage(tmp_path) == 'T3'
    _mark_checkpoint(tmp_path, 'P1')
    _mark_checkpoint(tmp_path, 'E2')
    assert latest_stage(tmp_path) == 'E2'


def test_build_prompt_opens_requested_span(service, layout):
    spec = PromptSpec(task='t2i', turns=[{'role': 'user', 'content': [{'text': 'Draw a red circle.'}]}])
    item = service.build_prompt(spec, 'image')
    assert int(item.input_ids[-1]) == int(layout.special(prompts.VISION_START))
    assert not bool(item.slot_mask.any())


def test_build_prompt_rejects_unsupported_output(service):
    spec = PromptSpec(task='chat', turns=[{'role': 'user', 'content': [{'text': 'hi'}]}])
    with pytest.raises(UsageError):
        service.build_prompt(spec, 'image')
    with pytest.raises(UsageError):
        service.build_prompt(spec, 'smell')
    with pytest.raises(UsageError):
        service.build_prompt(PromptSpec(task='juggle', turns=spec.turns), 'text')


def test_build_prompt_requires_user_turn_last(service):
    spec = PromptSpec(task='chat', turns=[
        {'role': 'user', 'content': [{'text': 'hi'}]},
        {'role': 'assistant', 'content': [{'text': 'hello'}]},
    ])
    with pytest.raises(UsageError):
        service.build_prompt(spec, 'text')


def test_unknown_content_part(service):
    spec = PromptSpec(task='chat', turns=[{'role': 'user', 'content': [{'smell': 'x'}]}])
    with pytest.raises(UsageError):
        service.build_prompt(spec, 'text')


def test_prompt_audio_carries_both_streams(service, tiny_cfg, layout, tmp_path):
    service.training._components = build_components(tiny_cfg)
    save_wav(torch.linspace(-0.5, 0.5, 16000), tmp_path / 'question.wav', 16000)
    spec = PromptSpec(task='asr', base_dir=tmp_path,
                      turns=[{'role': 'user', 'content': [{'audio': 'question.wav'}, {'text': 'Transcribe.'}]}])
    item = service.build_prompt(spec, 'text')
    count = audio_embedding_count(16000, tiny_cfg.encoders)
    assert span_report(item, layout) == [('audio', 0, count), ('audio', count, 0)]
