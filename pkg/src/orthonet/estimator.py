"""A thin scikit-learn-style facade over the network stack.

OrthoMLPClassifier follows the estimator protocol (fit/predict/predict_proba/
score/get_params/set_params) without depending on scikit-learn, so it can sit
in sklearn pipelines or be used standalone. Inputs use the sklearn layout,
(n_samples, n_features); internally everything is feature-major.
"""

from __future__ import annotations

import inspect

import numpy as np

from . import data as data_mod
from . import nn


class NotFittedError(ValueError):
    """Raised when predict/score is called before fit."""


class OrthoMLPClassifier:
    """Multi-layer perceptron classifier with a choice of weight constraint.

    method selects how linear-layer weights are treated: "plain" (none),
    "wn" (weight normalization), "olm"/"olm_var" (orthonormal by
    construction via the proxy-parameter transform), or a manifold update
    rule ("ei_qr", "ci_qr", "cayt", "qr_proj").
    """

    def __init__(
        self,
        hidden_layers: int = 2,
        hidden_width: int = 64,
        method: str = "olm",
        group_size: int = 32,
        optimizer: str = "sgd",
        lr: float = 0.1,
        momentum: float = 0.9,
        epochs: int = 20,
        batch_size: int = 256,
        with_scale: bool = False,
        batchnorm: bool = False,
        weight_decay: float = 0.0,
        seed: int = 0,
    ):
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.method = method
        self.group_size = group_size
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.batch_size = batch_size
        self.with_scale = with_scale
        self.batchnorm = batchnorm
        self.weight_decay = weight_decay
        self.seed = seed

    @classmethod
    def _param_names(cls) -> list:
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for OrthoMLPClassifier"
                )
            setattr(self, name, value)
        return self

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2:
            raise ValueError("X must be 2-d (n_samples, n_features)")
        if y.shape != (X.shape[0],):
            raise ValueError("y must be 1-d with one label per sample")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]
        ds = data_mod.Dataset(
            np.ascontiguousarray(X.T), y_idx.astype(np.int64), self.classes_.size
        )
        rng = np.random.default_rng([self.seed, 0xFFFFFFFF])
        net = nn.build_mlp(
            ds.dim,
            ds.num_classes,
            self.hidden_width,
            self.hidden_layers,
            self.method,
            self.group_size,
            rng,
            with_scale=self.with_scale,
            with_batchnorm=self.batchnorm,
        )
        net.opt = nn.OptConfig(
            kind=self.optimizer,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )
        for epoch in range(self.epochs):
            for feats, labels in data_mod.batches(
                ds, self.batch_size, self.seed, epoch
            ):
                loss, grads = nn.net_loss_and_grads(net, feats, labels)
                if not np.isfinite(loss):
                    raise ValueError(
                        "training diverged (non-finite loss); lower lr"
                    )
                nn.net_apply_grads(net, grads, self.lr)
        self.net_ = net
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "net_"):
            raise NotFittedError("this OrthoMLPClassifier is not fitted yet")

    def decision_function(self, X):
        self._check_fitted()
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ValueError(f"X must have shape (n_samples, {self.n_features_in_})")
        eff = nn.net_effective_layers(self.net_)
        logits = nn.effective_forward(eff, np.ascontiguousarray(X.T))
        return logits.T

    def predict_proba(self, X):
        logits = self.decision_function(X).T
        shifted = logits - logits.max(axis=0)[None, :]
        exp = np.exp(shifted)
        return (exp / exp.sum(axis=0)[None, :]).T

    def predict(self, X):
        self._check_fitted()
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def score(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))
