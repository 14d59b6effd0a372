"""Long-context nucleotide language models built on FFT long convolutions.

numpy throughout; hot loops have numba kernels with a numpy fallback chosen
by the ``HYSEQ_KERNELS`` environment variable.
"""
from ._kernels import BACKEND
from .errors import (CapacityError, ConfigError, DataError, DimensionError, DomainError,
                     FormatError, NumericalError, SizeError, StateError)
from .model import ClassificationHead, DecoderStack, ModelConfig

__version__ = "0.1.0"

__all__ = ["BACKEND", "CapacityError", "ClassificationHead", "ConfigError", "DataError",
           "DecoderStack", "DimensionError", "DomainError", "FormatError", "ModelConfig",
           "NumericalError", "SizeError", "StateError"]
