"""
Finite scalar quantization

Each of D dimensions is squashed into (-1, 1), scaled by K and rounded, giving
a lattice point in {-K..K}^D. Shifting by K yields digits in {0..2K}, read as a
little-endian (2K+1)-ary number: the code. With D=8, K=1 there are 3^8 = 6561
codes.
"""
import logging
from typing import Tuple

import torch
import torch.nn as nn

from config import FsqConfig, QuantizerError

logger = logging.getLogger(__name__)


def squash(z: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """Smooth, odd, saturating map into (-1, 1)"""
    return torch.tanh(z / cfg.bound_scale)


def _check_finite(z: torch.Tensor) -> None:
    if not torch.isfinite(z).all():
        raise QuantizerError("FSQ input contains non-finite values")


def _check_length(z: torch.Tensor, cfg: FsqConfig) -> None:
    if z.shape[-1] != cfg.dims:
        raise QuantizerError(f"expected last dimension {cfg.dims}, got {z.shape[-1]}")


def _basis(cfg: FsqConfig, device=None) -> torch.Tensor:
    return cfg.levels ** torch.arange(cfg.dims, dtype=torch.long, device=device)


def bound_round(z: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """
    Lattice point of z: round(K * squash(z)), integer components in [-K, K]

    Infinite inputs saturate to +-K; NaN is rejected.
    """
    if torch.isnan(z).any():
        raise QuantizerError("FSQ input contains NaN")
    _check_length(z, cfg)
    scaled = cfg.k * squash(z, cfg)
    return torch.round(scaled).clamp(-cfg.k, cfg.k).to(torch.long)


def digits_to_code(digits: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """sum_i digits[i] * (2K+1)^i"""
    _check_length(digits, cfg)
    digits = digits.to(torch.long)
    if (digits < 0).any() or (digits > 2 * cfg.k).any():
        raise QuantizerError(f"digit outside [0, {2 * cfg.k}]")
    return (digits * _basis(cfg, digits.device)).sum(dim=-1)


def code_to_digits(code: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    code = torch.as_tensor(code, dtype=torch.long)
    if (code < 0).any() or (code >= cfg.codebook_size).any():
        raise QuantizerError(f"code outside [0, {cfg.codebook_size})")
    return (code.unsqueeze(-1) // _basis(cfg, code.device)) % cfg.levels


def quantize(z: torch.Tensor, cfg: FsqConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Quantize vectors of length D

    Returns:
        (code, lattice point) with code in [0, (2K+1)^D)
    """
    lattice = bound_round(z, cfg)
    return digits_to_code(lattice + cfg.k, cfg), lattice


def dequantize(code: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """Lattice point of a code, scaled by 1/K onto the [-1, 1] grid"""
    lattice = code_to_digits(code, cfg) - cfg.k
    return lattice.to(torch.get_default_dtype()) / cfg.k


def quantize_ste(z: torch.Tensor, cfg: FsqConfig) -> torch.Tensor:
    """
    Forward: dequantize(quantize(z)). Backward: gradient of squash(z) only,
    the rounding is passed straight through.
    """
    _check_finite(z)
    _check_length(z, cfg)
    scaled = cfg.k * squash(z, cfg)
    rounded = scaled + (torch.round(scaled) - scaled).detach()
    return rounded / cfg.k


class FiniteScalarQuantizer(nn.Module):
    """FSQ with the learned low-rank projection pair around the lattice"""

    def __init__(self, cfg: FsqConfig):
        super().__init__()
        self.cfg = cfg
        self.project_in = nn.Linear(cfg.feature_dim, cfg.dims)
        self.project_out = nn.Linear(cfg.dims, cfg.feature_dim)

    @property
    def codebook_size(self) -> int:
        return self.cfg.codebook_size

    def forward(self, features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            features: (..., feature_dim)

        Returns:
            (reconstructed features, codes)
        """
        z = self.project_in(features)
        quantized = quantize_ste(z, self.cfg)
        codes, _ = quantize(z.detach(), self.cfg)
        return self.project_out(quantized), codes

    def encode(self, features: torch.Tensor) -> torch.Tensor:
        codes, _ = quantize(self.project_in(features), self.cfg)
        return codes

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        lattice = dequantize(codes, self.cfg).to(self.project_out.weight.dtype)
        return self.project_out(lattice)
