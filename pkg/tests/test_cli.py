import json

import pytest

from omnistack import EXIT_OK, EXIT_USAGE, load_run_config, main
from config import UsageError
from modality_vocab import layout_from_config


def test_unknown_command_is_a_usage_error():
    assert main(['bogus']) == EXIT_USAGE


def test_train_needs_exactly_one_selector(tmp_path):
    assert main(['train', '--out', str(tmp_path)]) == EXIT_USAGE
    assert main(['train', '--stage', 'P1', '--all', '--out', str(tmp_path)]) == EXIT_USAGE


def test_generate_needs_prompt(tmp_path):
    assert main(['generate', '--out', str(tmp_path)]) == EXIT_USAGE


def test_e2e_without_checkpoint_exits_2(tmp_path):
    assert main(['eval', '--suite', 'e2e', '--out', str(tmp_path)]) == EXIT_USAGE


def test_missing_config_file(tmp_path):
    with pytest.raises(UsageError):
        load_run_config(tmp_path, str(tmp_path / 'absent.json'))


def test_inspect_vocab_without_corpus(tmp_path):
    out = tmp_path / 'vocab.tsv'
    assert main(['inspect-vocab', '--out', str(tmp_path), '-o', str(out)]) == EXIT_OK
    lines = out.read_text(encoding='utf-8').splitlines()
    assert lines[0] == 'id\tregion\tlocal_id\tname'
    assert len(lines) == 1 + layout_from_config(load_run_config(tmp_path).vocab).total


@pytest.mark.slow
def test_init_tiny_writes_run(tmp_path):
    root = tmp_path / 'run'
    assert main(['init', '--tiny', '--seed', '3', '--out', str(root)]) == EXIT_OK
    cfg = json.loads((root / 'config.json').read_text())
    assert cfg['seed'] == 3
    assert (root / 'stages.json').is_file()
    assert (root / 'vocab.tsv').is_file()
    assert (root / 'corpus' / 'manifest.json').is_file()
    assert load_run_config(root).vocab.text_size == 320
