"""Empirical adversarial bias-variance decomposition.

Train one student per disjoint data split, attack each at fixed test points,
aggregate predictions by the geometric mean on the simplex, and decompose the
mean adversarial cross-entropy into intrinsic noise + adversarial bias +
adversarial variance.  The identity (mean CE = noise + bias + variance) holds
exactly and is re-verified numerically on every point.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import attacks, autodiff as ad, data as data_mod, models, training
from .errors import ConfigError, ContractError, RunError


@dataclass(frozen=True)
class SplitPlan:
    n_splits: int = 2
    repetitions: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_splits < 1 or self.repetitions < 1:
            raise ConfigError("n_splits and repetitions must be >= 1")


@dataclass
class VarianceReport:
    noise: float
    bias: float
    variance: float
    risk: float
    splits: int
    repetitions: int
    max_identity_residual: float
    per_point: np.ndarray | None = None  # (n_points, 4): noise, bias, var, risk

    def to_dict(self):
        d = {
            "noise": self.noise,
            "bias": self.bias,
            "variance": self.variance,
            "risk": self.risk,
            "splits": self.splits,
            "repetitions": self.repetitions,
            "max_identity_residual": self.max_identity_residual,
        }
        if self.per_point is not None:
            d["per_point"] = self.per_point.tolist()
        return d


def geometric_mean_simplex(preds) -> np.ndarray:
    """Renormalized exp(mean log p) over a stack of simplex rows."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    if preds.shape[0] < 1:
        raise ContractError("need at least one prediction")
    logs = np.log(np.clip(preds, ad.PROB_FLOOR, None))
    g = np.exp(logs.mean(axis=0))
    return g / g.sum()


def decompose_point(y, preds):
    """(noise, bias, variance) for one target row and its adversarial
    predictions; their sum equals mean CE(y, pred) exactly."""
    y = np.asarray(y, dtype=np.float64)
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    if preds.shape[0] < 1:
        raise ContractError("decompose_point needs at least one prediction")
    log_preds = np.log(np.clip(preds, ad.PROB_FLOOR, None))
    mean_log = log_preds.mean(axis=0)
    z = np.exp(mean_log).sum()
    log_ybar = mean_log - np.log(z)
    log_y = np.log(np.clip(y, ad.PROB_FLOOR, None))
    noise = float(-np.sum(y * log_y))
    bias = float(np.sum(y * (log_y - log_ybar)))
    variance = float(-np.log(z))
    return noise, bias, variance


def mean_adversarial_ce(y, preds) -> float:
    """Independent check value: mean over predictions of CE(y, pred)."""
    y = np.asarray(y, dtype=np.float64)
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    return float(np.mean(-np.sum(
        y * np.log(np.clip(preds, ad.PROB_FLOOR, None)), axis=1)))


def estimate_avar(dataset: data_mod.Dataset, test_x, test_y, teacher,
                  train_cfg: training.TrainConfig, attack_cfg,
                  plan: SplitPlan, keep_per_point=True) -> VarianceReport:
    """Split/train/attack/aggregate pipeline for the decomposition.

    ``test_y`` are integer labels (targets are one-hot).  The test-point
    attack is CE-based PGD with the evaluation convention.  Returns terms
    averaged over repetitions and test points.
    """
    test_x = np.asarray(test_x, dtype=np.float64)
    test_y = np.asarray(test_y)
    n = dataset.x_train.shape[0]
    per_split = n // plan.n_splits
    if per_split < 1:
        raise ConfigError("dataset too small for the requested splits")
    c = dataset.n_classes
    y_onehot = data_mod.onehot(test_y, c)
    eval_cfg = replace(attack_cfg, inner_loss="ce-student")

    rep_terms = []  # per repetition: (n_points, 4) noise/bias/var/risk
    max_residual = 0.0
    for k in range(plan.repetitions):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(plan.seed, 2, k)))
        perm = rng.permutation(n)  # remainder beyond N*per_split is dropped
        preds = []
        for j in range(plan.n_splits):
            idx = perm[j * per_split:(j + 1) * per_split]
            sub = data_mod.Dataset(
                x_train=dataset.x_train[idx], y_train=dataset.y_train[idx],
                x_test=dataset.x_test, y_test=dataset.y_test,
                n_classes=c, feature_box=dataset.feature_box,
                margin=dataset.margin)
            cfg = replace(train_cfg,
                          seed=training._batch_seed(plan.seed, k, j),
                          tas_every=0, eval_train_robust=False)
            try:
                student, _, _ = training.train(teacher, sub, cfg)
            except RunError as e:
                raise RunError(f"repetition {k}, split {j}: {e}") from e
            pb = attacks.pgd(student, None, test_x, y_onehot, eval_cfg)
            preds.append(models.predict_probs(student, pb.x_adv))
        preds = np.stack(preds)  # (N, n_points, C)

        terms = np.empty((test_x.shape[0], 4))
        for i in range(test_x.shape[0]):
            noise, bias, var = decompose_point(y_onehot[i], preds[:, i])
            risk = mean_adversarial_ce(y_onehot[i], preds[:, i])
            max_residual = max(max_residual,
                               abs(risk - (noise + bias + var)))
            terms[i] = (noise, bias, var, risk)
        rep_terms.append(terms)

    per_point = np.mean(rep_terms, axis=0)
    noise, bias, var, risk = per_point.mean(axis=0)
    return VarianceReport(
        noise=float(noise), bias=float(bias), variance=float(var),
        risk=float(risk), splits=plan.n_splits,
        repetitions=plan.repetitions,
        max_identity_residual=float(max_residual),
        per_point=per_point if keep_per_point else None)
