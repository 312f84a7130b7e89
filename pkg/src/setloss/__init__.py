"""Permutation-invariant set losses, networks, datasets and experiment
harness for set reconstruction and rule-body prediction."""

from .autodiff import Tape, Tensor
from .losses import (DEFAULT_EPS, LossKind, elementwise_cross_entropy,
                     flattened_cross_entropy, hausdorff_distance,
                     pairwise_cost_matrix, set_average_distance,
                     set_cross_entropy, set_loss)
from .metrics import (EvalReport, reconstruction_success,
                      reconstruction_success_ratio, rule_accuracy)
from .nets import (RuleClausePredictor, SetAutoencoder, TrainConfig,
                   load_checkpoint, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "DEFAULT_EPS",
    "LossKind",
    "elementwise_cross_entropy",
    "pairwise_cost_matrix",
    "set_cross_entropy",
    "set_average_distance",
    "hausdorff_distance",
    "flattened_cross_entropy",
    "set_loss",
    "EvalReport",
    "reconstruction_success",
    "reconstruction_success_ratio",
    "rule_accuracy",
    "SetAutoencoder",
    "RuleClausePredictor",
    "TrainConfig",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
