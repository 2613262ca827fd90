"""Outer-minimization objectives: PGD-AT/TRADES baselines, the KL-based
distillation losses (ARD/RSLAD/AdaAD/IGDM), entropy weights, and the
transferability-weighted objectives (entropy-weighted and its clean-term
variant).

The teacher is always a frozen constant in the outer loss; gradients flow
only through the student.  Per-sample losses are reduced by arithmetic mean
over the minibatch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .errors import ConfigError, ContractError

METHODS = ("pgd-at", "trades", "ard", "rslad", "adaad", "igdm", "saad", "saad-c")

# Outer objective used as the weighted base loss for each method.  The
# entropy-weighted methods build on the AdaAD+IGDM composite.
_BASE_OF = {
    "ard": "ard",
    "rslad": "ard",  # same outer KL(f_T(x) || f_S(x+delta)); they differ in the attack
    "adaad": "adaad",
    "igdm": "igdm",
    "saad": "igdm",
    "saad-c": "igdm",
}


@dataclass(frozen=True)
class DistillSpec:
    method: str
    alpha_igdm: float = 0.0
    beta: float = 0.0
    trades_lambda: float = 1.0
    lambda_in: float = 1.0  # first-order correction weight of the fast attack
    weighting: str = "entropy"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.alpha_igdm < 0 or self.beta < 0:
            raise ConfigError("alpha_igdm and beta must be >= 0")
        if self.trades_lambda <= 0:
            raise ConfigError("trades_lambda must be > 0")
        if self.weighting not in ("entropy", "unit"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray  # raw per-sample entropies, in [0, log C]
    w_tilde: np.ndarray  # normalized by log C, in [0, 1]


def entropy_weights(teacher_adv_probs) -> WeightVector:
    """Per-sample weights: entropy of the teacher on student-attacked inputs."""
    p = ad.validate_prob_batch(teacher_adv_probs)
    w = ad.entropy_rows(p)
    return WeightVector(w=w, w_tilde=w / np.log(p.shape[1]))


def unit_weights(n: int, c: int) -> WeightVector:
    """Degenerate weighting: every sample counts equally (w = 1)."""
    return WeightVector(w=np.ones(n), w_tilde=np.ones(n) / np.log(c))


def base_ad_loss(student, teacher, x, x_adv, spec: DistillSpec,
                 student_params_t=None) -> Tensor:
    """Per-sample base distillation loss for the selected method.

    ``student_params_t`` may supply requires-grad parameter tensors so the
    caller can backpropagate into the student; otherwise the student is a
    constant too (evaluation mode).
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    t_clean = models.model_logits(teacher, x)
    t_adv = models.model_logits(teacher, x_adv)
    return ad_loss_from_teacher_logits(student, t_clean, t_adv, x, x_adv, spec,
                                       student_params_t=student_params_t)


def ad_loss_from_teacher_logits(student, t_clean_logits, t_adv_logits, x, x_adv,
                                spec: DistillSpec,
                                student_params_t=None) -> Tensor:
    """Same as ``base_ad_loss`` with the teacher's logits precomputed (used by
    the harness so emulated teacher outputs can be substituted)."""
    base = _BASE_OF.get(spec.method)
    if base is None:
        raise ConfigError(f"method {spec.method!r} has no base AD loss")
    sp = models.model_params(student)

    def s_logits(inp):
        return models.forward_t(sp, Tensor(inp), param_tensors=student_params_t)

    if base == "ard":
        return ad.kl_const_target_t(ad.softmax_probs(t_clean_logits),
                                    s_logits(x_adv))

    adaad = ad.kl_const_target_t(ad.softmax_probs(t_adv_logits), s_logits(x_adv))
    if base == "adaad":
        return adaad

    # Gradient-matching term: differences of raw logits mapped through softmax
    # so KL stays on the simplex; gradient flows through the student's clean
    # and adversarial logits.
    t_diff_target = ad.softmax_probs(np.asarray(t_adv_logits) -
                                     np.asarray(t_clean_logits))
    s_diff = ad.sub(s_logits(x_adv), s_logits(x))
    igdm_term = ad.kl_const_target_t(t_diff_target, s_diff)
    return ad.add(adaad, ad.mul(igdm_term, spec.alpha_igdm))


def saad_loss(per_sample_base, weights: WeightVector):
    """Mean of w_i * base_i with the raw entropy weights."""
    w = np.asarray(weights.w, dtype=np.float64)
    if isinstance(per_sample_base, Tensor):
        if per_sample_base.data.shape != w.shape:
            raise ContractError("weights/base length mismatch")
        return ad.tmean(ad.mul(per_sample_base, w))
    base = np.asarray(per_sample_base, dtype=np.float64)
    if base.shape != w.shape:
        raise ContractError("weights/base length mismatch")
    return float(np.mean(w * base))


def saadc_loss(per_sample_base, weights: WeightVector, clean_kl, beta):
    """Weighted robust term plus beta * mean((1 - w_tilde) * clean KL)."""
    if beta < 0:
        raise ContractError("beta must be >= 0")
    inv = 1.0 - np.asarray(weights.w_tilde, dtype=np.float64)
    robust = saad_loss(per_sample_base, weights)
    if isinstance(clean_kl, Tensor):
        if clean_kl.data.shape != inv.shape:
            raise ContractError("weights/clean length mismatch")
        clean = ad.tmean(ad.mul(clean_kl, inv))
        return ad.add(robust, ad.mul(clean, beta))
    ck = np.asarray(clean_kl, dtype=np.float64)
    if ck.shape != inv.shape:
        raise ContractError("weights/clean length mismatch")
    return robust + beta * float(np.mean(inv * ck))


def clean_distill_kl(student, teacher, x, student_params_t=None) -> Tensor:
    """Per-sample KL(f_T(x) || f_S(x)), the clean distillation term."""
    sp = models.model_params(student)
    target = ad.softmax_probs(models.model_logits(teacher, x))
    logits = models.forward_t(sp, Tensor(np.asarray(x, dtype=np.float64)),
                              param_tensors=student_params_t)
    return ad.kl_const_target_t(target, logits)


def trades_loss(student, x, x_adv, y_onehot, trades_lambda,
                student_params_t=None):
    """Mean clean CE plus lambda * mean KL(f_S(x) || f_S(x_adv))."""
    sp = models.model_params(student)
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)

    def s_logits(inp):
        return models.forward_t(sp, Tensor(inp), param_tensors=student_params_t)

    clean_logits = s_logits(x)
    ce = ad.cross_entropy_t(np.asarray(y_onehot, dtype=np.float64), clean_logits)
    kl = ad.kl_t(clean_logits, s_logits(x_adv))
    return ad.add(ad.tmean(ce), ad.mul(ad.tmean(kl), trades_lambda))


def pgd_at_loss(student, x_adv, y_onehot, student_params_t=None):
    """Mean CE(y, f_S(x + delta)): the PGD-AT outer objective."""
    sp = models.model_params(student)
    logits = models.forward_t(sp, Tensor(np.asarray(x_adv, dtype=np.float64)),
                              param_tensors=student_params_t)
    return ad.tmean(ad.cross_entropy_t(np.asarray(y_onehot, dtype=np.float64),
                                       logits))
