"""Inner maximization: FGSM, multi-step PGD with selectable loss, and the
fast first-order attack that linearizes the teacher's true-class logit.

All attacks operate on an L-infinity ball of radius ``epsilon`` intersected
with the input box, and are deterministic given the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError

INNER_LOSSES = (
    "ce-student",
    "kl-student-clean",
    "kl-teacher-clean",
    "kl-teacher-adv",
    "fast-first-order",
)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    step_size: float
    steps: int
    inner_loss: str = "ce-student"
    init_scale: float = 0.001
    input_box: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.steps > 0 and self.step_size <= 0:
            raise ConfigError("step_size must be > 0 when steps > 0")
        if self.input_box[0] >= self.input_box[1]:
            raise ConfigError("input box must satisfy lo < hi")
        if self.inner_loss not in INNER_LOSSES:
            raise ConfigError(f"unknown inner loss {self.inner_loss!r}")


@dataclass
class PerturbedBatch:
    x_adv: np.ndarray
    delta: np.ndarray
    loss_trace: list = field(default_factory=list)


def project_linf(delta, epsilon):
    """Elementwise clamp of the perturbation to [-epsilon, epsilon]."""
    return np.clip(delta, -epsilon, epsilon)


def _init_delta(x, cfg: AttackConfig) -> np.ndarray:
    if cfg.init_scale == 0.0:
        return np.zeros_like(x)
    rng = np.random.default_rng(cfg.seed)
    delta = cfg.init_scale * rng.standard_normal(x.shape)
    return project_linf(delta, cfg.epsilon)


def _clamp_box(x, delta, cfg: AttackConfig):
    lo, hi = cfg.input_box
    x_adv = np.clip(x + delta, lo, hi)
    return x_adv, x_adv - x


def _ascend(x, cfg: AttackConfig, per_sample_loss_at) -> PerturbedBatch:
    """Signed-gradient ascent with per-step projection and box clamp.

    ``per_sample_loss_at(x_adv_tensor)`` must return a per-sample loss Tensor
    built on the given input leaf.
    """
    x = np.asarray(x, dtype=np.float64)
    delta = _init_delta(x, cfg)
    _, delta = _clamp_box(x, delta, cfg)
    trace = []
    for _ in range(cfg.steps):
        leaf = Tensor(x + delta, requires_grad=True)
        loss = per_sample_loss_at(leaf)
        trace.append(float(loss.data.mean()))
        ad.tsum(loss).backward()
        delta = delta + cfg.step_size * np.sign(leaf.grad)
        delta = project_linf(delta, cfg.epsilon)
        _, delta = _clamp_box(x, delta, cfg)
    x_adv, delta = _clamp_box(x, delta, cfg)
    return PerturbedBatch(x_adv=x_adv, delta=delta, loss_trace=trace)


def fgsm(model, x, y_onehot, cfg: AttackConfig) -> PerturbedBatch:
    """Single signed-gradient step on CE(y, f(x))."""
    x = np.asarray(x, dtype=np.float64)
    y_onehot = np.asarray(y_onehot, dtype=np.float64)
    leaf = Tensor(x, requires_grad=True)
    loss = ad.cross_entropy_t(y_onehot, models.model_logits_t(model, leaf))
    ad.tsum(loss).backward()
    delta = cfg.epsilon * np.sign(leaf.grad)
    x_adv, delta = _clamp_box(x, delta, cfg)
    return PerturbedBatch(x_adv=x_adv, delta=delta,
                          loss_trace=[float(loss.data.mean())])


def pgd(student, teacher, x, y_onehot, cfg: AttackConfig) -> PerturbedBatch:
    """Multi-step PGD with the configured inner loss.

    ``teacher`` may be None for losses that reference only the student.
    """
    x = np.asarray(x, dtype=np.float64)
    inner = cfg.inner_loss
    if inner == "fast-first-order":
        raise ConfigError("use fast_inner_max for the fast-first-order loss")
    if inner in ("kl-teacher-clean", "kl-teacher-adv") and teacher is None:
        raise ConfigError(f"inner loss {inner!r} requires a teacher")

    if inner == "ce-student":
        target = np.asarray(y_onehot, dtype=np.float64)

        def loss_at(leaf):
            return ad.cross_entropy_t(target, models.model_logits_t(student, leaf))

    elif inner == "kl-student-clean":
        clean = ad.softmax_probs(models.model_logits(student, x))

        def loss_at(leaf):
            return ad.kl_const_target_t(clean, models.model_logits_t(student, leaf))

    elif inner == "kl-teacher-clean":
        target = ad.softmax_probs(models.model_logits(teacher, x))

        def loss_at(leaf):
            return ad.kl_const_target_t(target, models.model_logits_t(student, leaf))

    else:  # kl-teacher-adv: teacher is re-evaluated at x + delta every step
        def loss_at(leaf):
            t_logits = models.model_logits_t(teacher, leaf)
            s_logits = models.model_logits_t(student, leaf)
            return ad.kl_t(t_logits, s_logits)

    return _ascend(x, cfg, loss_at)


def teacher_linearization(teacher, x, labels):
    """One teacher forward + backward: clean logits and the input gradient of
    the true-class logit, as required by the fast attack."""
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    leaf = Tensor(x, requires_grad=True)
    logits = models.model_logits_t(teacher, leaf)
    onehot = np.eye(logits.data.shape[1])[labels]
    ad.tsum(ad.mul(logits, onehot)).backward()
    return logits.data.copy(), leaf.grad.copy()


def fast_inner_max(student, teacher_clean_logits, teacher_trueclass_grad,
                   x, labels, cfg: AttackConfig, lambda_in=1.0) -> PerturbedBatch:
    """PGD on KL(softmax(corrected teacher logits) || f_S(x + delta)).

    Only the true-class logit is corrected, by lambda_in * <g, delta> where g
    is the precomputed input gradient of that logit; the teacher is never
    evaluated inside the loop.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    t_logits = np.asarray(teacher_clean_logits, dtype=np.float64)
    g = np.asarray(teacher_trueclass_grad, dtype=np.float64)
    if g.shape != x.shape:
        raise ContractError(
            f"teacher gradient shape {g.shape} does not match input {x.shape}"
        )
    if t_logits.shape[0] != x.shape[0]:
        raise ContractError("teacher logits batch size mismatch")
    rows = np.arange(x.shape[0])

    def loss_at(leaf):
        delta = leaf.data - x
        corrected = t_logits.copy()
        corrected[rows, labels] += lambda_in * np.sum(g * delta, axis=1)
        target = ad.softmax_probs(corrected)
        return ad.kl_const_target_t(target, models.model_logits_t(student, leaf))

    return _ascend(x, cfg, loss_at)


def check_perturbation(pb: PerturbedBatch, x, cfg: AttackConfig, tol=1e-12):
    """Raise unless the batch satisfies the ball and box invariants."""
    x = np.asarray(x, dtype=np.float64)
    if np.max(np.abs(pb.delta)) > cfg.epsilon + tol:
        raise ContractError("perturbation escapes the L-inf ball")
    lo, hi = cfg.input_box
    if np.any(pb.x_adv < lo - tol) or np.any(pb.x_adv > hi + tol):
        raise ContractError("adversarial input escapes the input box")
    if np.max(np.abs(pb.x_adv - (x + pb.delta))) > tol:
        raise ContractError("x_adv != x + delta")
