import json

import pytest
import torch

from config import CheckpointError
from corpus_service import Corpus, CorpusRegistry
from modality_vocab import Region
from stage_orchestrator import stage_by_name
from training_service import (
    OmniModel, StageResult, TrainingService, append_metrics, build_components, components_exist,
)
from utils.path_utils import require_checkpoint


@pytest.fixture
def model(tiny_cfg, layout):
    torch.manual_seed(0)
    return OmniModel(tiny_cfg, layout)


def test_parameter_groups_partition_the_model(model):
    groups = model.parameter_groups()
    names = [name for params in groups.values() for name in params]
    assert len(names) == len(set(names))
    assert set(names) == set(model.named_params())
    for group in ('embedding', 'output_head', 'decoder_layers', 'vision_encoder', 'vision_adapter',
                  'audio_encoder', 'audio_adapter', 'compressor'):
        assert groups[group], group


@pytest.mark.parametrize('key', ['caption', 'asr', 'video'])
def test_resolve_fills_every_slot(model, corpus, layout, key):
    audio_tokenizer = build_components(model.cfg).audio_tokenizer
    registry = CorpusRegistry(corpus, layout, corpus.tokenizer(), audio_tokenizer=audio_tokenizer, seed=0)
    item = registry.sample(key)
    assert item.slot_spans
    for span in item.slot_spans:
        values = model.resolve(span)
        assert tuple(values.shape) == (span.length, model.cfg.backbone.hidden)
        assert bool(torch.isfinite(values).all())


def test_append_metrics_writes_json_lines(tmp_path):
    path = tmp_path / 'run' / 'metrics.jsonl'
    append_metrics(path, {'stage': 'P1', 'loss': 1.5})
    append_metrics(path, {'stage': 'P1', 'loss': 1.25})
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r['loss'] for r in rows] == [1.5, 1.25]


def test_stage_result_serializes():
    result = StageResult(name='P1', steps=1, tokens=10, final_loss=2.0)
    assert result.to_dict()['tokens'] == 10


def test_load_model_without_checkpoint(tmp_path, tiny_cfg, corpus):
    service = TrainingService(tiny_cfg, tmp_path, corpus=corpus)
    with pytest.raises(CheckpointError):
        service.load_model('S4')


@pytest.mark.slow
def test_p1_trains_only_modality_rows(tmp_path, tiny_cfg, corpus_root):
    tiny_cfg.vision_decoder.steps = 4
    tiny_cfg.vocoder.steps = 2
    service = TrainingService(tiny_cfg, tmp_path, corpus=Corpus(corpus_root))
    stage = stage_by_name('P1', budget_scale=tiny_cfg.budget_scale)

    model = service.build_model(stage)
    assert components_exist(tmp_path)
    embed_before = model.backbone.embedding.weight.detach().clone()
    layers_before = {n: p.detach().clone() for n, p in model.backbone.layers.named_parameters()}

    result = service.run_stage(stage, max_steps=2, model=model)
    assert 1 <= result.steps <= 2

    vision_start = service.layout.offset(Region.VISION)
    embed_after = model.backbone.embedding.weight.detach()
    assert torch.equal(embed_after[:vision_start], embed_before[:vision_start])
    assert not torch.equal(embed_after[vision_start:], embed_before[vision_start:])
    for name, param in model.backbone.layers.named_parameters():
        assert torch.equal(param.detach(), layers_before[name])

    checkpoint = require_checkpoint(tmp_path, 'P1')
    assert (checkpoint / 'ledger.json').is_file()
    rows = [json.loads(line) for line in (tmp_path / 'metrics.jsonl').read_text().splitlines()]
    assert rows[0]['stage'] == 'components'
    assert any(r['stage'] == 'P1' for r in rows)

    reloaded = service.load_model('P1')
    assert torch.equal(reloaded.backbone.embedding.weight, model.backbone.embedding.weight)
