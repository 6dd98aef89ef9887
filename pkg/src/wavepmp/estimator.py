"""scikit-learn style estimators trained by wave relaxation.

Inputs follow the scikit-learn convention (samples in rows); internally the
network works on samples in columns.  The whole training set is one batch and
the node metrics are matched to its size unless ``metric="identity"``.

The default Courant number and injection gain are conservative: explicit
relaxation loses stability when layer gains grow, and larger ``eta`` or ``nu``
can raise :class:`~wavepmp.trainer.InstabilityError` late in training.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .grid import GridConfig
from .models import make_mlp
from .pmp import forward_rollout
from .trainer import TrainConfig, train


class _WavePMPBase(BaseEstimator):
    _loss = "squared"

    def __init__(self, hidden_layer_sizes=(8,), activation="tanh", eta=0.1, nu=0.25, alpha=0.5,
                 budget=2000, update_every=1, transport="balanced", optimizer="resistive",
                 tol=None, metric="matched", random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.eta = eta
        self.nu = nu
        self.alpha = alpha
        self.budget = budget
        self.update_every = update_every
        self.transport = transport
        self.optimizer = optimizer
        self.tol = tol
        self.metric = metric
        self.random_state = random_state

    def _fit_columns(self, X, T):
        widths = [X.shape[1], *[int(h) for h in self.hidden_layer_sizes], T.shape[1]]
        if self.metric not in ("matched", "identity"):
            raise ValueError(f"metric must be 'matched' or 'identity', got {self.metric!r}")
        batch = X.shape[0] if self.metric == "matched" else None
        net = make_mlp(widths, self.activation, seed=self.random_state, loss=self._loss, batch_size=batch)
        grid = GridConfig.from_courant(net.depth + 1, self.nu, alpha=self.alpha)
        config = TrainConfig(grid, optimizer=self.optimizer, eta=self.eta, budget=self.budget,
                             update_every=self.update_every, transport=self.transport, tol=self.tol,
                             seed=self.random_state, log_every=max(1, self.budget // 50))
        self.state_, self.metrics_ = train(net, [(X.T, T.T)], config)
        self.net_ = net
        self.n_features_in_ = X.shape[1]
        self.loss_ = self.metrics_[-1].rollout_loss
        return self

    def _forward(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward_rollout(self.net_, X.T)[-1].T


class WavePMPRegressor(RegressorMixin, _WavePMPBase):
    """MLP regressor with squared loss trained by wave relaxation."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        self._y_1d = y.ndim == 1
        return self._fit_columns(X, y.reshape(len(y), -1).astype(float))

    def predict(self, X):
        out = self._forward(X)
        return out[:, 0] if self._y_1d else out


class WavePMPClassifier(ClassifierMixin, _WavePMPBase):
    """MLP classifier with softmax cross entropy trained by wave relaxation."""

    _loss = "softmax_ce"

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        T = np.eye(len(self.classes_))[self.encoder_.transform(y)]
        return self._fit_columns(X, T)

    def predict_proba(self, X):
        Z = self._forward(X)
        Z = Z - Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        return P / P.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
