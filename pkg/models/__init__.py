"""
Models package

Backbone, encoders, quantizers and the two modality decoders. Every decoder
implements models.base.ModalityDecoder.
"""
from .base import ModalityDecoder

__all__ = ['ModalityDecoder']
