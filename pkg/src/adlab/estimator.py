"""Scikit-learn style estimators wrapping the training harness.

``RobustMlpClassifier`` adversarially trains an MLP (PGD-AT or TRADES);
``AdversarialDistiller`` distills a student from a fitted robust teacher.
Both expose the usual fit/predict/predict_proba/score surface plus
get_params/set_params so they compose with sklearn tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import models, training
from .attacks import AttackConfig
from .data import Dataset
from .errors import ConfigError
from .losses import DistillSpec
from .models import TeacherEmulation
from .training import TrainConfig


def _build_dataset(X, y, input_box):
    # Estimators train on everything they are given; held-out evaluation is
    # the caller's concern, so the internal test split is a token slice.
    n_classes = int(np.max(y)) + 1
    return Dataset(x_train=X, y_train=y, x_test=X[:1], y_test=y[:1],
                   n_classes=n_classes, feature_box=input_box)


class _FitPredictMixin:
    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return models.predict_probs(self.params_, X)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def _train_config(self, use_swa_attr="use_swa"):
        eval_steps = max(2 * self.attack_steps, 1)
        train_atk = AttackConfig(
            epsilon=self.epsilon, step_size=self.epsilon / 4.0,
            steps=self.attack_steps, input_box=self.input_box)
        eval_atk = AttackConfig(
            epsilon=self.epsilon, step_size=self.epsilon / 4.0,
            steps=eval_steps, init_scale=0.0, input_box=self.input_box)
        return train_atk, eval_atk


class RobustMlpClassifier(_FitPredictMixin, ClassifierMixin, BaseEstimator):
    """Adversarially trained MLP classifier (PGD-AT or TRADES)."""

    def __init__(self, hidden_layers=(64, 64), method="pgd-at", epsilon=0.05,
                 attack_steps=10, epochs=30, batch_size=64, lr=0.1,
                 momentum=0.9, weight_decay=5e-4, trades_lambda=6.0,
                 input_box=(0.0, 1.0), use_swa=False, seed=0):
        self.hidden_layers = hidden_layers
        self.method = method
        self.epsilon = epsilon
        self.attack_steps = attack_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.trades_lambda = trades_lambda
        self.input_box = input_box
        self.use_swa = use_swa
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        if self.method not in ("pgd-at", "trades"):
            raise ConfigError("RobustMlpClassifier supports pgd-at or trades")
        train_atk, eval_atk = self._train_config()
        cfg = TrainConfig(
            student_layers=tuple(self.hidden_layers), epochs=self.epochs,
            train_attack=train_atk, eval_attack=eval_atk,
            distill=DistillSpec(method=self.method,
                                trades_lambda=self.trades_lambda),
            batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, seed=self.seed,
            eval_train_robust=False)
        ds = _build_dataset(X, y, self.input_box)
        final, swa, metrics = training.train(None, ds, cfg)
        self.params_ = swa if self.use_swa else final
        self.metrics_ = metrics
        self.classes_ = np.arange(ds.n_classes)
        return self


class AdversarialDistiller(_FitPredictMixin, ClassifierMixin, BaseEstimator):
    """Distill a compact robust student from a fitted robust teacher.

    ``teacher`` is a fitted ``RobustMlpClassifier`` or raw ``MlpParams``.
    ``method`` selects the outer objective; the entropy-weighted methods use
    the fast first-order inner attack.
    """

    def __init__(self, teacher=None, hidden_layers=(32,), method="saad",
                 epsilon=0.05, attack_steps=10, epochs=30, batch_size=64,
                 lr=0.1, momentum=0.9, weight_decay=5e-4, alpha_igdm=1.0,
                 beta=0.0, lambda_in=1.0, weighting="entropy",
                 emulation_mode="as-trained", temperature=1.0, alpha=0.0,
                 input_box=(0.0, 1.0), use_swa=False, seed=0):
        self.teacher = teacher
        self.hidden_layers = hidden_layers
        self.method = method
        self.epsilon = epsilon
        self.attack_steps = attack_steps
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.alpha_igdm = alpha_igdm
        self.beta = beta
        self.lambda_in = lambda_in
        self.weighting = weighting
        self.emulation_mode = emulation_mode
        self.temperature = temperature
        self.alpha = alpha
        self.input_box = input_box
        self.use_swa = use_swa
        self.seed = seed

    def _teacher_params(self):
        if self.teacher is None:
            raise ConfigError("AdversarialDistiller requires a teacher")
        if isinstance(self.teacher, models.MlpParams):
            return self.teacher
        if hasattr(self.teacher, "params_"):
            return self.teacher.params_
        raise ConfigError("teacher must be MlpParams or a fitted estimator")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        emu = TeacherEmulation(mode=self.emulation_mode,
                               temperature=self.temperature, alpha=self.alpha)
        teacher = training.EmulatedTeacher(self._teacher_params(), emu)
        train_atk, eval_atk = self._train_config()
        cfg = TrainConfig(
            student_layers=tuple(self.hidden_layers), epochs=self.epochs,
            train_attack=train_atk, eval_attack=eval_atk,
            distill=DistillSpec(method=self.method, alpha_igdm=self.alpha_igdm,
                                beta=self.beta, lambda_in=self.lambda_in,
                                weighting=self.weighting),
            batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, seed=self.seed,
            eval_train_robust=False)
        ds = _build_dataset(X, y, self.input_box)
        final, swa, metrics = training.train(teacher, ds, cfg)
        self.params_ = swa if self.use_swa else final
        self.metrics_ = metrics
        self.classes_ = np.arange(ds.n_classes)
        return self
