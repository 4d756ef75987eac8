"""scikit-learn style wrapper around pretrain -> soft prune -> finetune."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .budgets import all_budgets
from .datakit import dataset_from_arrays, split_and_batch
from .models import HardMask, build_model
from .pruner import PruneConfig, TrainConfig, finetune, net_from_checkpoint, soft_prune, train_plain


class ChipNetClassifier(ClassifierMixin, BaseEstimator):
    """Train a small network, prune it to a resource budget and finetune the slim result.

    ``X`` is ``[n_samples, channels, height, width]`` or ``[n_samples, n_features]``.
    After ``fit``, ``net_`` is the slim network, ``mask_`` the selected
    :class:`~chipnet.models.HardMask` and ``budgets_`` its achieved budgets.
    """

    def __init__(
        self,
        preset: str = "tiny-cnn",
        widths=None,
        budget_kind: str = "channel",
        target: float = 0.5,
        pretrain_epochs: int = 5,
        prune_epochs: int = 20,
        finetune_epochs: int = 30,
        batch_size: int = 32,
        val_fraction: float = 0.2,
        alpha1: float = 10.0,
        alpha2: float = 30.0,
        random_state: int = 0,
    ):
        self.preset = preset
        self.widths = widths
        self.budget_kind = budget_kind
        self.target = target
        self.pretrain_epochs = pretrain_epochs
        self.prune_epochs = prune_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.random_state = random_state

    def fit(self, X, y):
        X, y = validate_data(self, X, y, allow_nd=True, dtype=np.float32)
        if X.ndim not in (2, 4):
            raise ValueError(f"X must be 2-D or 4-D, got {X.ndim}-D")
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("ChipNetClassifier needs at least two classes")
        seed = int(self.random_state)
        ds = dataset_from_arrays(X, encoded, len(self.classes_))
        data = split_and_batch(ds, self.val_fraction, self.batch_size, seed=seed)
        self.mean_, self.std_ = data.train.mean, data.train.std

        net = build_model(self.preset, widths=self.widths, input_shape=X.shape[1:], num_classes=len(self.classes_),
                          seed=seed)
        _, self.pretrain_records_ = train_plain(net, data, TrainConfig(epochs=self.pretrain_epochs, seed=seed))
        pcfg = PruneConfig(budget_kind=self.budget_kind, target=self.target, epochs=self.prune_epochs,
                           alpha1=self.alpha1, alpha2=self.alpha2, seed=seed)
        ckpt, self.prune_records_ = soft_prune(net, data, pcfg)
        pruned = net_from_checkpoint(ckpt)
        self.mask_ = HardMask(ckpt.arrays["mask"].astype(np.uint8), pruned.shape.mask_sizes)
        self.budgets_ = all_budgets(self.mask_.bits.astype(np.float64), pruned.shape)
        self.net_, _, self.finetune_records_ = finetune(pruned, self.mask_, data,
                                                        TrainConfig(epochs=self.finetune_epochs, seed=seed))
        return self

    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = validate_data(self, X, reset=False, allow_nd=True, dtype=np.float32)
        shape = (1, -1) + (1,) * (X.ndim - 2)
        X = (X - self.mean_.reshape(shape)) / self.std_.reshape(shape)
        return self.net_.predict(X.astype(np.float32))

    def decision_function(self, X) -> np.ndarray:
        return self._logits(X)

    def predict_proba(self, X) -> np.ndarray:
        logits = self._logits(X).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]
