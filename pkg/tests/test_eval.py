import json

import pytest
import torch

from config import CheckpointError, UsageError
from eval_service import (
    CRITERIA, SUITES, CheckResult, EvalReport, check_autoguidance_identity, check_freeze_policy,
    check_interleave_integrity, check_loss_masking, check_mixture_concentration, pixel_reconstruction, run_suite,
)
from models.vision_decoder import decode_latent, encode_latent, psnr
from models.vision_tokenizer import ImageBuffer
from training_service import build_components


def test_suites_cover_every_criterion_once():
    listed = [c for criteria in SUITES.values() for c in criteria]
    assert sorted(listed) == sorted(CRITERIA)
    assert len(listed) == len(set(listed)) == 14


def test_report_serializes_all_criteria(tmp_path):
    report = EvalReport(suite='unit', seed=0)
    for criterion, name in CRITERIA.items():
        report.checks[criterion] = CheckResult(criterion=criterion, name=name)
    report.checks[3] = CheckResult(criterion=3, name=CRITERIA[3], status='fail')
    data = json.loads(report.save(tmp_path / 'report.json').read_text())
    assert [c['criterion'] for c in data['checks']] == list(range(1, 15))
    assert data['ok'] is False
    assert [c.criterion for c in report.failures] == [3]


def test_unit_suite_passes(tiny_cfg):
    report = run_suite('unit', tiny_cfg, seed=0)
    assert report.ok, [c.to_dict() for c in report.failures]
    ran = [c for c in report.checks.values() if c.status != 'not_run']
    assert sorted(c.criterion for c in ran) == list(SUITES['unit'])
    assert len(report.checks) == 14


def test_unknown_suite(tiny_cfg):
    with pytest.raises(UsageError):
        run_suite('smoke', tiny_cfg, seed=0)


def test_e2e_without_checkpoint(tmp_path, tiny_cfg):
    with pytest.raises(CheckpointError):
        run_suite('e2e', tiny_cfg, seed=0, root=tmp_path)
    with pytest.raises(UsageError):
        run_suite('e2e', tiny_cfg, seed=0)


@pytest.mark.parametrize('check', [
    check_freeze_policy, check_loss_masking, check_mixture_concentration, check_autoguidance_identity,
])
def test_property_checks(tiny_cfg, check):
    result = check(tiny_cfg, 0, None)
    assert result.passed, result.to_dict()


def test_interleave_integrity_small(tiny_cfg):
    result = check_interleave_integrity(tiny_cfg, 0, None, cases=200, seeds=50)
    assert result.passed, result.to_dict()


@pytest.mark.slow
def test_properties_suite_passes(tiny_cfg):
    report = run_suite('properties', tiny_cfg, seed=0)
    assert report.ok, [c.to_dict() for c in report.failures]


def test_reconstruction_lands_on_the_source_pixel_grid(tiny_cfg):
    torch.manual_seed(0)
    comps = build_components(tiny_cfg)
    pixels = torch.rand(3, 60, 100)
    grid = comps.vision_tokenizer.tokenize_any(ImageBuffer(pixels=pixels))
    decoded = pixel_reconstruction(comps.vision_decoder(), grid, pixels, seed=0)
    assert decoded.shape == pixels.shape
    assert 0.0 <= float(decoded.min()) and float(decoded.max()) <= 1.0


def test_latent_psnr_hides_pixel_detail():
    factor = 8
    checker = ((torch.arange(32)[:, None] + torch.arange(32)[None, :]) % 2).float()
    pixels = checker.expand(3, 32, 32).clone()
    flat = decode_latent(encode_latent(pixels, factor), (32, 32))
    # every 8x8 block averages to 0.5 either way
    assert psnr(encode_latent(flat, factor), encode_latent(pixels, factor)) > 60.0
    assert psnr(flat, pixels) < 10.0
