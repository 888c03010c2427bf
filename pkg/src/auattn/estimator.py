"""scikit-learn compatible wrapper around the detector."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .dataio import ArrayDataset
from .model import DEFAULT_FILTERS, INFER, ModelConfig, attention_forward, extract_features, predict_proba
from .objective import binarize, macro_f1
from .trainer import TrainConfig, train
from .validation import check_images, check_labels


class AUDetector(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Multi-label AU detector with the usual fit / predict / transform surface.

    ``X`` is an ``(N, S, S, 3)`` image array in [0, 1] (or uint8) and ``y``
    an ``(N, C)`` array with entries in {0, 1, -1}; -1 entries are ignored.
    ``transform`` returns the attention-pooled feature vectors.

    Parameters
    ----------
    pool_schedule : str
        One ``0``/``1`` per conv block, ``"111100"`` by default.
    epochs, batch_size, lr, post_warm_lr, lr_switch_epoch
        Adam schedule: ``lr`` for the first ``lr_switch_epoch`` epochs,
        ``post_warm_lr`` afterwards.
    """

    def __init__(self, input_size=112, block_filters=DEFAULT_FILTERS, pool_schedule="111100",
                 attention_hidden=128, epochs=10, batch_size=256, lr=1e-3, post_warm_lr=1e-4,
                 lr_switch_epoch=5, threshold=0.5, precision="float32", deterministic=False,
                 random_state=0):
        self.input_size = input_size
        self.block_filters = block_filters
        self.pool_schedule = pool_schedule
        self.attention_hidden = attention_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.post_warm_lr = post_warm_lr
        self.lr_switch_epoch = lr_switch_epoch
        self.threshold = threshold
        self.precision = precision
        self.deterministic = deterministic
        self.random_state = random_state

    def _configs(self, n_aus):
        model_config = ModelConfig(input_size=self.input_size, block_filters=tuple(self.block_filters),
                                   pool_schedule=self.pool_schedule,
                                   attention_hidden=self.attention_hidden, num_aus=n_aus).validate()
        train_config = TrainConfig(initial_lr=self.lr, post_warm_lr=self.post_warm_lr,
                                   lr_switch_epoch=self.lr_switch_epoch, epochs=self.epochs,
                                   batch_size=self.batch_size, seed=int(self.random_state or 0),
                                   deterministic=self.deterministic, threshold=self.threshold,
                                   precision=self.precision, prefetch=0).validate()
        return model_config, train_config

    def fit(self, X, y, eval_set=None):
        X = check_images(X, self.input_size)
        y = check_labels(y, len(X))
        model_config, train_config = self._configs(y.shape[1])
        val = None
        if eval_set is not None:
            Xv, yv = eval_set
            Xv = check_images(Xv, self.input_size)
            val = ArrayDataset(Xv, check_labels(yv, len(Xv), y.shape[1]))
        ckpt = train(model_config, train_config, ArrayDataset(X, y), val)
        self.model_config_ = model_config
        self.params_ = ckpt.params
        self.class_weights_ = ckpt.class_weights
        self.log_ = ckpt.log
        self.checkpoint_ = ckpt
        self.n_outputs_ = y.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.input_size)
        return predict_proba(X.astype(self.params_.dtype, copy=False), self.params_, self.model_config_)

    def predict(self, X):
        return binarize(self.predict_proba(X), self.threshold)

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_images(X, self.input_size).astype(self.params_.dtype, copy=False)
        with ad.no_grad():
            fmap = extract_features(X, self.params_, self.model_config_, INFER)
            return attention_forward(fmap, self.params_, INFER).vector.data

    def score(self, X, y, sample_weight=None):
        """Macro F1 over AUs (the detector's target metric), not subset accuracy."""
        y = check_labels(y, len(np.asarray(X)) if np.asarray(X).ndim == 4 else 1, self.n_outputs_)
        return macro_f1(self.predict(X), y).macro_f1

    def _more_tags(self):
        return {"multilabel": True, "requires_y": True}
