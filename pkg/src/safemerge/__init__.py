"""Safety-aware merging of same-architecture checkpoints."""

from .criterion import LossReport, merge_loss, mc_accuracy, refusal_rate
from .merge import MergeRecipe, TaskVector, merge, task_vector
from .optimize import evomm_optimize, grid_search, lm_cocktail_weights
from .tensor_store import Checkpoint, load_checkpoint, save_checkpoint, validate_compat

__all__ = [
    "Checkpoint", "LossReport", "MergeRecipe", "TaskVector", "evomm_optimize", "grid_search",
    "lm_cocktail_weights", "load_checkpoint", "mc_accuracy", "merge", "merge_loss",
    "refusal_rate", "save_checkpoint", "task_vector", "validate_compat",
]

__version__ = "0.1.0"
