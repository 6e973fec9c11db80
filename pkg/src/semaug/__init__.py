"""Toy hierarchical semantic augmentation for open-vocabulary detection.

A small numpy detector pretrained on a synthetic general domain, adapted to a
synthetic vertical domain with LoRA and a multi-scale prompt bank, and routed
per image by a content-normalized reconstruction-error router.
"""

from .config import Config, ConfigError, load_default
from .detector import OpenVocabDetector, PromptAugmentedDetector
from .metrics import harmonic_mean, mean_average_precision
from .router import DDASRouter, SemanticAwareRouter

__all__ = [
    "Config",
    "ConfigError",
    "DDASRouter",
    "OpenVocabDetector",
    "PromptAugmentedDetector",
    "SemanticAwareRouter",
    "harmonic_mean",
    "load_default",
    "mean_average_precision",
]

__version__ = "0.1.0"
