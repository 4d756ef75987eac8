"""Budget-constrained structured channel pruning on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .budgets import BudgetKind, LayerSpec, NetworkShape, all_budgets, budget, budget_loss  # noqa: E402
from .datakit import (Checkpoint, Dataset, DataSplit, export_mask, import_mask, load_checkpoint,  # noqa: E402
                      load_idx, save_checkpoint, split_and_batch, synth_blobs)
from .models import HardMask, MaskedNet, build_model, materialize, validate_connectivity  # noqa: E402
from .projections import (ContinuationState, MaskSet, crispness_loss, heaviside, logistic,  # noqa: E402
                          logistic_round, schedule_step)
from .pruner import (EpochRecord, PruneConfig, TrainConfig, finetune, hard_prune, soft_prune,  # noqa: E402
                     train_plain, transfer_mask)
from .estimator import ChipNetClassifier  # noqa: E402

__all__ = [
    "BudgetKind", "LayerSpec", "NetworkShape", "all_budgets", "budget", "budget_loss",
    "Checkpoint", "Dataset", "DataSplit", "export_mask", "import_mask", "load_checkpoint", "load_idx",
    "save_checkpoint", "split_and_batch", "synth_blobs",
    "HardMask", "MaskedNet", "build_model", "materialize", "validate_connectivity",
    "ContinuationState", "MaskSet", "crispness_loss", "heaviside", "logistic", "logistic_round", "schedule_step",
    "EpochRecord", "PruneConfig", "TrainConfig", "finetune", "hard_prune", "soft_prune", "train_plain",
    "transfer_mask", "ChipNetClassifier",
]
