"""scikit-learn style wrapper: learn an iResNet regularizer for a fixed forward operator."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .iresnet_core import MLPDiagonalNet, OneParameterNet, invert
from .operator_core import NoiseModel, as_operator, build_singular_system, normalize_operator
from .spectral_filters import (
    closed_form_affine,
    closed_form_one_param,
    closed_form_relu,
    closed_form_soft_threshold,
)
from .training import TrainConfig, TrainSet, make_targets, train_diagonal

__all__ = ["IResNetRegularizer"]

_TRAINED = ("mlp", "affine", "one_parameter")
_CLOSED = ("tikhonov", "squared_soft_tsvd", "relu", "soft_threshold")


class IResNetRegularizer(TransformerMixin, BaseEstimator):
    """Approximation-trained iResNet ``phi ~ A = A_tilde^T A_tilde`` and its inverse.

    ``fit(X)`` takes clean signals ``X`` (rows) and learns ``phi``;
    ``transform`` applies ``phi``, ``inverse_transform`` inverts it and
    ``predict(Y)`` reconstructs signals from data ``Y`` via
    ``phi^{-1}(A_tilde^T Y)``. The operator is rescaled to unit norm on fit
    (``operator_scale_``); ``predict`` expects data of the unscaled operator.

    ``architecture`` is a trained net (``mlp``, ``affine``,
    ``one_parameter``) or a closed-form optimum (``tikhonov``,
    ``squared_soft_tsvd``, ``relu``, ``soft_threshold``).
    """

    def __init__(self, operator=None, L=0.9, architecture="mlp", epochs=100, batch_size=64,
                 lr=1e-3, noise_delta=0.0, alpha=0.0, k_max=30, seed=0, eig_method="jacobi"):
        self.operator = operator
        self.L = L
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.noise_delta = noise_delta
        self.alpha = alpha
        self.k_max = k_max
        self.seed = seed
        self.eig_method = eig_method

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if self.operator is None:
            raise ValueError("operator must be given")
        A = as_operator(self.operator, "operator")
        if A.shape[1] != X.shape[1]:
            raise ValueError(f"operator has {A.shape[1]} columns, X has {X.shape[1]} features")
        if self.architecture not in _TRAINED + _CLOSED:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        A_n, scale = normalize_operator(A)
        system = build_singular_system(A_n, method=self.eig_method)
        C = system.coefficients(X)
        arch = self.architecture
        if arch in _TRAINED:
            if arch == "mlp":
                net = MLPDiagonalNet.init(system, self.L, seed=self.seed)
            elif arch == "affine":
                net = MLPDiagonalNet.affine(system, self.L, seed=self.seed)
            else:
                net = OneParameterNet(system, self.L)
            targets = make_targets(system, C, NoiseModel(self.noise_delta, self.seed))
            cfg = TrainConfig(self.L, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                              seed=self.seed, noise_delta=self.noise_delta)
            result = train_diagonal(net, TrainSet(C, targets), cfg)
            self.loss_trace_ = result.trace
        elif arch == "tikhonov":
            net = closed_form_one_param(system, self.L)
        elif arch == "squared_soft_tsvd":
            net = closed_form_affine(system, self.L, C.mean(axis=0))
        elif arch == "relu":
            net = closed_form_relu(system, self.L)
        else:
            net = closed_form_soft_threshold(system, self.L, self.alpha, C)
        self.net_ = net
        self.system_ = system
        self.operator_ = A_n
        self.operator_scale_ = scale
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        return self.net_.forward(X)

    def inverse_transform(self, Z):
        check_is_fitted(self, "net_")
        Z = check_array(Z, dtype=np.float64)
        return invert(self.net_, Z, k_max=self.k_max, tol=0.0).x

    def predict(self, Y):
        """Reconstruct signals from data ``Y`` of the original (unscaled) operator."""
        check_is_fitted(self, "net_")
        Y = check_array(Y, dtype=np.float64)
        Z = (Y / self.operator_scale_) @ self.operator_
        return invert(self.net_, Z, k_max=self.k_max, tol=0.0).x

    def score(self, X, y=None):
        """Negative local approximation error ``-mean ||phi(x) - A x||^2``."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        R = self.net_.forward(X) - self.system_.apply_normal(X)
        return -float(np.mean(np.sum(R * R, axis=1)))
