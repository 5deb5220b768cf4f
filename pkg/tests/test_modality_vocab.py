import pytest
import torch

from config import RunConfig, VocabError
from modality_vocab import (
    ByteTokenizer, FreezePolicy, Region, build_layout, dump_tsv, expansion_freeze_mask,
    global_id, layout_from_config, resolve,
)
from models.backbone import OmniBackbone


def test_default_layout_regions_are_contiguous():
    layout = layout_from_config(RunConfig().vocab)
    specials = len(layout.special_tokens)
    assert layout.region_range(Region.SPECIALS) == (0, specials)
    assert layout.region_range(Region.TEXT) == (specials, specials + 1024)
    assert layout.region_range(Region.VISION)[0] == specials + 1024
    assert layout.region_range(Region.AUDIO)[1] == layout.total
    assert layout.total == specials + 1024 + 512 + 6561


def test_global_id_resolve_bijection_exhaustive():
    layout = layout_from_config(RunConfig().vocab)
    for token in range(layout.total):
        region, local = resolve(layout, token)
        assert global_id(layout, region, local) == token


def test_out_of_range_ids_rejected(layout):
    with pytest.raises(VocabError):
        resolve(layout, layout.total)
    with pytest.raises(VocabError):
        resolve(layout, -1)
    with pytest.raises(VocabError):
        global_id(layout, Region.VISION, layout.vision_codebook_size)


def test_build_layout_rejects_duplicates_and_empty_regions():
    with pytest.raises(VocabError, match='duplicate'):
        build_layout(['<a>', '<a>'], 300, 4, 4)
    with pytest.raises(VocabError, match='non-empty'):
        build_layout(['<a>'], 300, 0, 4)


def test_missing_control_token_rejected():
    cfg = RunConfig().vocab
    cfg.special_tokens = [t for t in cfg.special_tokens if t != '<think>']
    with pytest.raises(VocabError, match='missing'):
        layout_from_config(cfg)


def test_region_of_ids_matches_resolve(layout):
    ids = torch.arange(layout.total)
    regions = layout.region_of_ids(ids)
    for token in (0, layout.offset(Region.TEXT), layout.offset(Region.VISION), layout.total - 1):
        region, _ = resolve(layout, token)
        assert int(regions[token]) == [Region.SPECIALS, Region.TEXT, Region.VISION, Region.AUDIO].index(region)


def test_byte_tokenizer_round_trip_and_persistence(tmp_path):
    texts = ["the red circle is next to the blue square."] * 4 + ["count with me: one two three."]
    tokenizer = ByteTokenizer.train(texts, 300)
    assert 0 < len(tokenizer.merges) <= 44
    sample = "the blue circle, one two."
    ids = tokenizer.encode(sample)
    assert all(0 <= i < 300 for i in ids)
    assert len(ids) < len(sample.encode('utf-8'))
    assert tokenizer.decode(ids) == sample

    restored = ByteTokenizer.load(tokenizer.save(tmp_path / 'tok.json'))
    assert restored.encode(sample) == ids


def test_byte_tokenizer_handles_unseen_unicode():
    tokenizer = ByteTokenizer.train(["abc abc abc"], 260)
    assert tokenizer.decode(tokenizer.encode("héllo ✓")) == "héllo ✓"


def test_dump_tsv_has_one_row_per_id(layout, tmp_path):
    path = dump_tsv(layout, None, tmp_path / 'vocab.tsv')
    lines = path.read_text(encoding='utf-8').splitlines()
    assert lines[0] == "id\tregion\tlocal_id\tname"
    assert len(lines) == layout.total + 1
    assert lines[1].split('\t')[3] == layout.special_tokens[0]
    assert lines[-1].split('\t')[1] == 'audio'


def _registry(model):
    return model.parameter_groups()


def test_vocab_expansion_mask_freezes_text_rows_and_layers(tiny_cfg, layout):
    model = OmniBackbone(tiny_cfg.backbone, layout.total)
    mask = expansion_freeze_mask(layout, FreezePolicy.VOCAB_EXPANSION, _registry(model))
    start = layout.offset(Region.VISION)
    rows = mask.frozen_rows['embedding.weight']
    assert bool(rows[:start].all()) and not bool(rows[start:].any())
    assert 'output_head.weight' in mask.frozen_rows
    assert all(mask.is_frozen(n) for n in _registry(model)['decoder_layers'])


def test_full_policy_freezes_nothing(tiny_cfg, layout):
    model = OmniBackbone(tiny_cfg.backbone, layout.total)
    mask = expansion_freeze_mask(layout, 'full', _registry(model))
    assert not mask.frozen and not mask.frozen_rows


def test_adapter_only_needs_a_known_group(tiny_cfg, layout):
    model = OmniBackbone(tiny_cfg.backbone, layout.total)
    with pytest.raises(VocabError):
        expansion_freeze_mask(layout, FreezePolicy.ADAPTER_ONLY, _registry(model), adapter_group='nope')
    registry = dict(_registry(model), adapter={'adapter.w': torch.nn.Parameter(torch.zeros(2))})
    mask = expansion_freeze_mask(layout, FreezePolicy.ADAPTER_ONLY, registry, adapter_group='adapter')
    assert not mask.is_frozen('adapter.w')
    assert mask.is_frozen('embedding.weight')


def test_unknown_policy_rejected(tiny_cfg, layout):
    model = OmniBackbone(tiny_cfg.backbone, layout.total)
    with pytest.raises(VocabError, match='unknown freeze policy'):
        expansion_freeze_mask(layout, 'partial', _registry(model))
