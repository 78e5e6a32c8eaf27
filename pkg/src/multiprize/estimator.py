"""scikit-learn style wrapper around score training and finetuning."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .errors import ShapeError
from .nn import get_dtype, network_forward
from .supermask import SelectionPolicy
from .trainer import TrainConfig, finetune, finetune_config, train_mpt


class MPTClassifier(ClassifierMixin, BaseEstimator):
    """Find a binary subnetwork of a random conv net by training scores only.

    ``X`` is ``[N, C, H, W]``, or ``[N, C*H*W]`` together with
    ``input_shape``. Inputs are used as given (normalize beforehand).

    Fitted attributes: ``classes_``, ``checkpoint_``, ``history_``.
    """

    def __init__(
        self,
        arch="conv2",
        prune_ratio=0.5,
        alpha=1.0,
        selection="topk",
        scope="global",
        theta=None,
        epochs=5,
        batch_size=64,
        optimizer="sgd",
        lr=0.1,
        lr_schedule="cosine",
        momentum=0.9,
        weight_decay=1e-4,
        score_bound=None,
        input_shape=None,
        random_state=0,
    ):
        self.arch = arch
        self.prune_ratio = prune_ratio
        self.alpha = alpha
        self.selection = selection
        self.scope = scope
        self.theta = theta
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.score_bound = score_bound
        self.input_shape = input_shape
        self.random_state = random_state

    def _images(self, X):
        X = np.asarray(X)
        if X.ndim == 2:
            if self.input_shape is None:
                raise ShapeError("2-d X needs input_shape=(C, H, W)")
            X = X.reshape(len(X), *self.input_shape)
        if X.ndim != 4:
            raise ShapeError(f"X must be [N, C, H, W], got shape {X.shape}")
        return np.ascontiguousarray(X, dtype=get_dtype())

    def _config(self) -> TrainConfig:
        scope = "global" if self.scope == "global" else "layerwise"
        if self.selection == "topk":
            policy = SelectionPolicy("topk_sort", scope, self.prune_ratio)
            calibrate = None
        else:
            # no explicit theta: calibrate once to prune_ratio
            policy = SelectionPolicy("threshold", scope, None, 0.0 if self.theta is None else self.theta)
            calibrate = self.prune_ratio if self.theta is None else None
        return TrainConfig(
            arch=self.arch,
            alpha=self.alpha,
            selection=policy,
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            lr=self.lr,
            lr_schedule=self.lr_schedule,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            calibrate_theta=calibrate,
            score_bound=self.score_bound,
            timing=False,
        )

    def _dataset(self, X, y) -> Dataset:
        X, y = check_X_y(X, y, allow_nd=True, dtype=None)
        check_classification_targets(y)
        codes = np.searchsorted(self.classes_, y)
        if np.any(self.classes_[np.minimum(codes, len(self.classes_) - 1)] != y):
            raise ValueError("y contains labels unseen during fit")
        return Dataset(self._images(X), codes.astype(np.int64), len(self.classes_))

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=None)
        check_classification_targets(y)
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        data = self._dataset(X, y)
        self.n_features_in_ = int(np.prod(data.input_shape))
        self.checkpoint_, self.history_ = train_mpt(self._config(), data)
        return self

    def finetune(self, X, y, scope="last_layer", **overrides):
        """Train the latent weights of ``scope`` with the mask frozen."""
        check_is_fitted(self, "checkpoint_")
        data = self._dataset(X, y)
        cfg = finetune_config(seed=self.random_state, timing=False, **overrides)
        self.checkpoint_, history = finetune(self.checkpoint_, scope, cfg, data)
        self.history_ = list(self.history_) + list(history)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "checkpoint_")
        X = self._images(check_array(X, allow_nd=True, dtype=None))
        ckpt = self.checkpoint_
        eff = [w.astype(X.dtype) for w in ckpt.binarized()]
        return np.concatenate([network_forward(ckpt.spec, eff, X[i : i + 500]) for i in range(0, len(X), 500)])

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        z = self.decision_function(X)
        return self.classes_[z.argmax(axis=1)]
