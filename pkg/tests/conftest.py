"""Shared fixtures: the tiny run config, its layout and a seeded corpus"""
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import tiny_run_config  # noqa: E402
from corpus_service import Corpus, generate_corpus  # noqa: E402
from modality_vocab import layout_from_config  # noqa: E402


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True, warn_only=True)
    yield
    torch.use_deterministic_algorithms(False)


@pytest.fixture
def tiny_cfg():
    return tiny_run_config(seed=0)


@pytest.fixture
def layout(tiny_cfg):
    return layout_from_config(tiny_cfg.vocab)


@pytest.fixture(scope='session')
def corpus_root(tmp_path_factory):
    """A tiny corpus written once per session; tests must not modify it"""
    root = tmp_path_factory.mktemp('corpus')
    generate_corpus(tiny_run_config(seed=0), root, seed=0)
    return root


@pytest.fixture
def corpus(corpus_root):
    return Corpus(corpus_root)
