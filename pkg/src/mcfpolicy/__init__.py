"""Multi-arm causal forest effects and capacity-constrained treatment allocation."""
from .dataset import (ARM_LABELS, Dataset, FeatureSpec, Outcome, SyntheticConfig,
                      generate_synthetic, load_dataset, write_dataset)
from .exceptions import ConfigError, DataError, McfPolicyError, NumericError

__version__ = "0.1.0"

__all__ = [
    "ARM_LABELS", "ConfigError", "DataError", "Dataset", "FeatureSpec", "McfPolicyError",
    "NumericError", "Outcome", "SyntheticConfig", "generate_synthetic", "load_dataset",
    "write_dataset",
]
