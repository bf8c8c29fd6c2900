"""qreli: a model-agnostic quantization reliability lab.

Fake quantization with verification, desk-scale quantization-aware training
over frozen embeddings, calibration and OOD detection metrics, and Fourier
analysis of token feature maps, all operating on tensor bundles exported from
any vision-language model.
"""

__version__ = "0.1.0"

from .core import TensorBundle, cosine_normalize, make_rng, read_bundle, write_bundle
from .quantize import (
    QuantConfig,
    QuantParams,
    VerificationReport,
    compute_qparams,
    fake_quantize,
    verify_unique_values,
)
from .zeroshot import EmbeddingSet, LogitSet, accuracy, vulnerability, zero_shot_logits

__all__ = [
    "TensorBundle",
    "cosine_normalize",
    "make_rng",
    "read_bundle",
    "write_bundle",
    "QuantConfig",
    "QuantParams",
    "VerificationReport",
    "compute_qparams",
    "fake_quantize",
    "verify_unique_values",
    "EmbeddingSet",
    "LogitSet",
    "accuracy",
    "vulnerability",
    "zero_shot_logits",
    "__version__",
]
