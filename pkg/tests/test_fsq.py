import math

import pytest
import torch

from config import FsqConfig, QuantizerError
from models.fsq import (
    FiniteScalarQuantizer, bound_round, code_to_digits, dequantize, digits_to_code, quantize, quantize_ste,
)

CFG = FsqConfig()


def test_codebook_size_is_the_lattice():
    assert CFG.levels == 3
    assert CFG.codebook_size == 6561


def test_every_code_round_trips():
    codes = torch.arange(CFG.codebook_size)
    assert torch.equal(digits_to_code(code_to_digits(codes, CFG), CFG), codes)
    fixed, _ = quantize(dequantize(codes, CFG), CFG)
    assert torch.equal(fixed, codes)


def test_anchor_codes():
    center, lattice = quantize(torch.zeros(8), CFG)
    assert int(center) == 3280
    assert torch.equal(lattice, torch.zeros(8, dtype=torch.long))
    assert int(quantize(torch.full((8,), -math.inf), CFG)[0]) == 0
    assert int(quantize(torch.full((8,), math.inf), CFG)[0]) == 6560


def test_digits_are_little_endian():
    digits = torch.zeros(8, dtype=torch.long)
    digits[1] = 2
    assert int(digits_to_code(digits, CFG)) == 6


def test_bound_round_stays_in_range():
    z = torch.randn(500, 8) * 10
    lattice = bound_round(z, CFG)
    assert int(lattice.min()) >= -1 and int(lattice.max()) <= 1


def test_larger_k_widens_the_lattice():
    cfg = FsqConfig(dims=4, k=2)
    assert cfg.codebook_size == 625
    codes = torch.arange(cfg.codebook_size)
    assert torch.equal(digits_to_code(code_to_digits(codes, cfg), cfg), codes)


def test_invalid_inputs_rejected():
    with pytest.raises(QuantizerError):
        quantize(torch.full((8,), float('nan')), CFG)
    with pytest.raises(QuantizerError):
        quantize(torch.zeros(7), CFG)
    with pytest.raises(QuantizerError):
        code_to_digits(torch.tensor([6561]), CFG)
    with pytest.raises(QuantizerError):
        digits_to_code(torch.full((8,), 3), CFG)
    with pytest.raises(QuantizerError):
        quantize_ste(torch.full((8,), math.inf), CFG)


def test_ste_forward_matches_dequantize_and_backward_is_smooth():
    z = torch.randn(16, 8, dtype=torch.float64, requires_grad=True)
    out = quantize_ste(z, CFG)
    codes, _ = quantize(z.detach(), CFG)
    assert torch.allclose(out.detach(), dequantize(codes, CFG).to(torch.float64))
    out.sum().backward()
    expected = 1.0 - torch.tanh(z.detach()) ** 2
    assert torch.allclose(z.grad, expected)


def test_quantizer_module_shapes():
    fsq = FiniteScalarQuantizer(FsqConfig(feature_dim=32))
    features = torch.randn(10, 32)
    recon, codes = fsq(features)
    assert recon.shape == (10, 32)
    assert codes.shape == (10,)
    assert torch.equal(fsq.encode(features), codes)
    assert fsq.decode(codes).shape == (10, 32)
