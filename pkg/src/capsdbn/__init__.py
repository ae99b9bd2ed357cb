"""Capsule-network + convolutional DBN toolkit for small-image triage tasks.

Functional numpy core with a thin scikit-learn-style estimator layer on top
(`fit` / `transform` / `predict`, `get_params`), a batch CLI, and a
checkpoint format so trained models round-trip bit-exactly.
"""

__version__ = "0.1.0"

from .capsnet import CapsNetClassifier, CapsNetSpec
from .config import RunConfig
from .dbn import CrbmSpec, DbnFeatureExtractor, DbnStack, DbnTrainCfg
from .errors import CapsDbnError, ConfigurationError, NumericError, UsageError
from .hybrid import FusionHead, HybridClassifier, ReferralPolicy
from .preprocess import (
    AugmentSpec,
    BatchWhitener,
    ChannelStandardizer,
    ImagePatch,
    MedianDenoiser,
)

__all__ = [
    "AugmentSpec",
    "BatchWhitener",
    "CapsDbnError",
    "CapsNetClassifier",
    "CapsNetSpec",
    "ChannelStandardizer",
    "ConfigurationError",
    "CrbmSpec",
    "DbnFeatureExtractor",
    "DbnStack",
    "DbnTrainCfg",
    "FusionHead",
    "HybridClassifier",
    "ImagePatch",
    "MedianDenoiser",
    "NumericError",
    "ReferralPolicy",
    "RunConfig",
    "UsageError",
    "__version__",
]
