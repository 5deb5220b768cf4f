import numpy as np
import pytest
import torch

from config import StageError
from interleave_service import MaskFactors
from modality_vocab import FreezePolicy, Region
from models.backbone import VISION_SPAN_LENGTH
from stage_orchestrator import (
    SFT_CONTEXT, STAGE_ORDER, FreezeController, MixtureLedger, Mutation, StageRuntime, StageSpec, Trigger,
    advance, all_stages, builtin_stages, check_batch_tokens, concentration_bound, context_for, draw_keys, sample_batch,
    stage_by_name, stage_freeze_mask, stages_from_json, stages_to_json,
)


class _FakeRegistry:
    """Returns token lists of a fixed length per key"""

    def __init__(self, lengths):
        self.lengths = lengths
        self.calls = []

    def has(self, key):
        return key in self.lengths

    def sample(self, key, factors, target_roles, max_length):
        self.calls.append((key, factors, target_roles, max_length))
        return [0] * self.lengths[key]


def _params(layout):
    return {
        'embed.weight': torch.nn.Parameter(torch.randn(layout.total, 4)),
        'head.weight': torch.nn.Parameter(torch.randn(layout.total, 4)),
        'layer.weight': torch.nn.Parameter(torch.randn(4, 4)),
        'audio.weight': torch.nn.Parameter(torch.randn(3)),
        'vision.weight': torch.nn.Parameter(torch.randn(3)),
    }


def _registry(params):
    return {
        'embedding': {'embed.weight': params['embed.weight']},
        'output_head': {'head.weight': params['head.weight']},
        'decoder_layers': {'layer.weight': params['layer.weight']},
        'audio_encoder': {'audio.weight': params['audio.weight']},
        'vision_encoder': {'vision.weight': params['vision.weight']},
    }


def test_builtin_order_and_roles():
    stages = builtin_stages(budget_scale=1e-9)
    assert tuple(s.name for s in stages) == STAGE_ORDER
    assert stages[0].requires is None
    assert stages[0].freeze_policy is FreezePolicy.VOCAB_EXPANSION
    for stage in stages:
        if stage.name.startswith('S'):
            assert stage.target_roles == ['assistant']
            assert stage.context_length == SFT_CONTEXT
    assert all(s.token_budget >= 1 for s in stages)


def test_text_ladder_is_prepended():
    stages = builtin_stages(budget_scale=1e-9, with_text_pretrain=True)
    assert [s.name for s in stages[:4]] == ['T1', 'T2', 'T3', 'P1']
    assert stages[3].requires == 'T3'
    assert all(s.mtp_enabled for s in stages[:3])
    assert [s.context_length for s in stages[:3]] == [256, 512, 1024]


def test_p2_restores_vision_weight_before_its_budget_ends():
    p2 = stage_by_name('P2', budget_scale=1e-9)
    assert p2.mask_factors.vision == 0.5
    (trigger,) = p2.triggers
    assert trigger.mutation == Mutation('mask.vision', 1.0)
    assert trigger.token_count < p2.token_budget


def test_budget_scale_must_be_positive():
    with pytest.raises(StageError):
        builtin_stages(budget_scale=0)


def test_unknown_stage_name():
    with pytest.raises(StageError, match='unknown stage'):
        stage_by_name('Z9')
    assert set(all_stages()) >= set(STAGE_ORDER)


@pytest.mark.parametrize('kwargs', [
    {'mixture': {}},
    {'mixture': {'text': 0.0}},
    {'mixture': {'text': 1.0}, 'token_budget': 0},
    {'mixture': {'text': 1.0}, 'token_budget': 100,
     'triggers': [Trigger(50, Mutation('lr_scale', 0.5)), Trigger(10, Mutation('lr_scale', 0.1))]},
    {'mixture': {'text': 1.0}, 'token_budget': 100, 'triggers': [Trigger(100, Mutation('lr_scale', 0.5))]},
    {'mixture': {'text': 1.0}, 'freeze_policy': 'adapter_only'},
    {'mixture': {'text': 1.0}, 'freeze_policy': 'partial'},
    {'mixture': {'text': 1.0}, 'context_length': 1},
])
def test_stage_validation(kwargs):
    with pytest.raises(StageError):
        StageSpec(name='X', **kwargs)


def test_mutation_targets_are_checked():
    with pytest.raises(StageError):
        Mutation('mask.smell', 1.0)


def test_fractions_normalize():
    stage = StageSpec(name='X', mixture={'a': 1.0, 'b': 3.0})
    assert stage.fractions() == {'a': 0.25, 'b': 0.75}


def test_json_round_trip(tmp_path):
    stages = builtin_stages(budget_scale=1e-9, with_text_pretrain=True)
    path = stages_to_json(stages, tmp_path / 'stages.json')
    loaded = stages_from_json(path)
    assert [s.to_dict() for s in loaded] == [s.to_dict() for s in stages]


def test_unreadable_stage_file(tmp_path):
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json')
    with pytest.raises(StageError):
        stages_from_json(bad)
    with pytest.raises(StageError):
        stages_from_json(tmp_path / 'absent.json')


def test_context_for():
    assert context_for('T1') == 256
    assert context_for('P3') == 1024
    assert context_for('S4') == SFT_CONTEXT
    assert context_for(StageSpec(name='X', mixture={'text': 1.0}, context_length=64)) == 64
    with pytest.raises(StageError):
        context_for('Q1')


@pytest.mark.parametrize('seed', range(5))
def test_triggers_fire_exactly_once_in_order(seed):
    stage = StageSpec(
        name='X', mixture={'text': 1.0}, token_budget=1000, mask_factors=MaskFactors(vision=0.5),
        triggers=[Trigger(100, Mutation('mask.vision', 1.0)), Trigger(250, Mutation('lr_scale', 0.5)),
                  Trigger(250, Mutation('mask.audio', 2.0))],
    )
    runtime = StageRuntime(stage)
    ledger = MixtureLedger()
    rng = np.random.default_rng(seed)
    fired = []
    while ledger.total < stage.token_budget:
        ledger.add('text', int(rng.integers(1, 300)))
        fired.extend(advance(ledger, runtime))
    assert [m.field for m in fired] == ['mask.vision', 'lr_scale', 'mask.audio']
    assert sorted(runtime.fired) == [0, 1, 2]
    assert runtime.factors.vision == 1.0 and runtime.factors.audio == 2.0
    assert runtime.lr_scale == 0.5
    assert advance(ledger, runtime) == []


def test_refiring_a_trigger_is_an_error():
    stage = StageSpec(name='X', mixture={'text': 1.0}, token_budget=10,
                      triggers=[Trigger(1, Mutation('lr_scale', 0.5))])
    runtime = StageRuntime(stage)
    runtime.fire(0)
    with pytest.raises(AssertionError):
        runtime.fire(0)


def test_draw_keys_concentrate_on_mixture():
    stage = StageSpec(name='X', mixture={'a': 0.7, 'b': 0.2, 'c': 0.1})
    n = 4000
    keys = draw_keys(stage, n, np.random.default_rng(0))
    for key, p in stage.fractions().items():
        assert abs(keys.count(key) / n - p) <= concentration_bound(p, n)


def test_draw_keys_is_seeded():
    stage = StageSpec(name='X', mixture={'a': 1.0, 'b': 1.0})
    assert draw_keys(stage, 50, np.random.default_rng(3)) == draw_keys(stage, 50, np.random.default_rng(3))


def test_sample_batch_updates_ledger_and_passes_live_factors():
    stage = StageSpec(name='X', mixture={'a': 1.0, 'b': 1.0}, batch_size=6, context_length=128,
                      target_roles=['assistant'])
    registry = _FakeRegistry({'a': 3, 'b': 5})
    runtime = StageRuntime(stage)
    runtime.factors = MaskFactors(vision=0.25)
    ledger = MixtureLedger()
    batch = sample_batch(stage, registry, np.random.default_rng(0), runtime=runtime, ledger=ledger)
    assert len(batch.inputs) == 6
    assert batch.token_count == ledger.total
    assert sum(ledger.draws.values()) == 6
    assert all(call[1].vision == 0.25 and call[3] == 128 for call in registry.calls)
    assert {r.value for r in registry.calls[0][2]} == {'assistant'}


def test_sample_batch_requires_corpus_for_every_key():
    stage = StageSpec(name='X', mixture={'a': 1.0, 'missing': 1.0})
    with pytest.raises(StageError, match='missing'):
        sample_batch(stage, _FakeRegistry({'a': 1}), np.random.default_rng(0))


def test_ledger_consistency(tmp_path):
    ledger = MixtureLedger()
    ledger.add('a', 10)
    ledger.add('b', 30)
    assert ledger.fractions(by='tokens') == {'a': 0.25, 'b': 0.75}
    loaded = MixtureLedger.load(ledger.save(tmp_path / 'ledger.json'))
    assert loaded.to_dict() == ledger.to_dict()
    with pytest.raises(StageError):
        ledger.add('a', -1)
    with pytest.raises(StageError):
        MixtureLedger.from_dict({'tokens': {'a': 3}, 'draws': {'a': 1}, 'total': 4})


def test_stage_freeze_mask_adds_encoder_groups(layout):
    params = _params(layout)
    full = StageSpec(name='X', mixture={'text': 1.0})
    mask = stage_freeze_mask(full, layout, _registry(params))
    assert mask.is_frozen('audio.weight') and mask.is_frozen('vision.weight')
    assert not mask.is_frozen('layer.weight')

    open_vision = StageSpec(name='Y', mixture={'text': 1.0}, vision_encoder_trainable=True)
    mask = stage_freeze_mask(open_vision, layout, _registry(params))
    assert mask.is_frozen('audio.weight') and not mask.is_frozen('vision.weight')


def test_freeze_controller_keeps_text_rows_fixed(layout):
    params = _params(layout)
    stage = StageSpec(name='P', mixture={'image': 1.0}, freeze_policy=FreezePolicy.VOCAB_EXPANSION)
    controller = FreezeController(params)
    version = controller.install(stage_freeze_mask(stage, layout, _registry(params)))
    optimizer = torch.optim.AdamW([p for p in params.values() if p.requires_grad], lr=0.1, weight_decay=0.1)

    before = {name: p.detach().clone() for name, p in params.items()}
    loss = sum((p ** 2).sum() for p in params.values() if p.requires_grad)
    loss.backward()
    controller.step(optimizer, version)

    vision_start = layout.offset(Region.VISION)
    for name in ('embed.weight', 'head.weight'):
        assert torch.equal(params[name][:vision_start], before[name][:vision_start])
        assert not torch.equal(params[name][vision_start:], before[name][vision_start:])
    assert torch.equal(params['layer.weight'], before['layer.weight'])


def test_stale_mask_version_is_rejected(layout):
    params = _params(layout)
    controller = FreezeController(params)
    stage = StageSpec(name='X', mixture={'text': 1.0})
    old = controller.install(stage_freeze_mask(stage, layout, _registry(params)))
    controller.install(stage_freeze_mask(stage, layout, _registry(params)))
    optimizer = torch.optim.SGD([params['layer.weight']], lr=0.1)
    with pytest.raises(AssertionError):
        controller.step(optimizer, old)


def test_batch_tokens_never_exceed_first_stage():
    stages = builtin_stages(budget_scale=1e-9, with_text_pretrain=True)
    limit = stages[0].batch_size * stages[0].context_length
    assert all(s.batch_size * s.context_length <= limit for s in stages)
    wide = StageSpec(name='W', mixture={'text': 1.0}, batch_size=64, context_length=1024)
    with pytest.raises(StageError, match='tokens per batch'):
        check_batch_tokens([stages[0], wide])


def test_pretraining_context_holds_a_vision_span():
    stages = {s.name: s for s in builtin_stages(budget_scale=1e-9)}
    for name in ('P1', 'P2', 'P3'):
        # opener + 729 codes + closer, with room left for a caption
        assert stages[name].context_length > VISION_SPAN_LENGTH + 2
        assert stages[name].context_length == context_for(name)
    assert stages['P3'].batch_size < stages['P2'].batch_size
