"""
Abstract base class for modality decoders (vision tokens -> pixels,
audio codes -> waveform)
"""
from abc import ABC, abstractmethod
from typing import Any, Optional, Sequence

import torch


class ModalityDecoder(ABC):
    """Turns a completed discrete span emitted by the backbone into a signal"""

    modality: str = ''

    @abstractmethod
    def decode_span(
        self,
        local_ids: Sequence[int],
        seed: int = 0,
        context: Optional[Any] = None
    ) -> torch.Tensor:
        """
        Decode one span

        Args:
            local_ids: Codebook-local ids of the span (no control tokens)
            seed: Seed for stochastic decoders
            context: Decoder-specific extras (aspect record, speaker embedding)

        Returns:
            Pixels (3, H, W) in [0, 1] or waveform (samples,) in [-1, 1]
        """
        pass
