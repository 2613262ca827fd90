"""Sample-level transferability scoring, entropy histograms, the
robust-overfitting metric, and the entropy lower-bound checker.

A sample is transferable when the student-crafted perturbation moves the
teacher's output at least as close to the teacher's own adversarial response
as to its clean prediction (score >= 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attacks, autodiff as ad, models
from .errors import ConfigError, ContractError


@dataclass
class TASReport:
    per_sample_score: np.ndarray
    is_tas: np.ndarray
    ratio: float
    entropies: np.ndarray  # teacher entropy on student-attacked inputs

    def to_dict(self):
        return {
            "ratio": self.ratio,
            "per_sample_score": self.per_sample_score.tolist(),
            "is_tas": self.is_tas.astype(int).tolist(),
            "entropies": self.entropies.tolist(),
        }


@dataclass
class EntropyHistogram:
    bin_edges: np.ndarray
    counts: np.ndarray
    density: np.ndarray

    def to_dict(self):
        return {
            "bin_edges": self.bin_edges.tolist(),
            "counts": self.counts.tolist(),
            "density": self.density.tolist(),
        }


def tas_score(p_on_student_adv, teacher_clean, teacher_adv) -> np.ndarray:
    """KL(p || f_T(x)) - KL(p || f_T(x + delta_T)), p = f_T(x + delta_S)."""
    p = ad.validate_prob_batch(p_on_student_adv)
    clean = ad.validate_prob_batch(teacher_clean)
    q = ad.validate_prob_batch(teacher_adv)
    if p.shape != clean.shape or p.shape != q.shape:
        raise ContractError("tas_score: batch shapes must match")
    return ad.kl_rows(p, clean) - ad.kl_rows(p, q)


def tas_ratio(student, teacher, x, labels, attack_cfg_student, attack_cfg_teacher,
              emulation=None) -> TASReport:
    """Craft delta_S on the student and delta_T on the teacher (CE-based PGD),
    then score every sample against the teacher's responses.

    ``emulation`` optionally post-processes teacher probabilities before
    scoring (temperature sharpening / label interpolation).
    """
    if attack_cfg_student.epsilon != attack_cfg_teacher.epsilon:
        raise ConfigError("student and teacher attacks must share epsilon")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    c = models.model_params(teacher).n_classes
    onehot = np.eye(c)[labels]

    pb_s = attacks.pgd(student, teacher, x, onehot, attack_cfg_student)
    pb_t = attacks.pgd(teacher, None, x, onehot, attack_cfg_teacher)

    def teacher_probs(inp):
        p = ad.softmax_probs(models.model_logits(teacher, inp))
        if emulation is not None:
            p = models.emulate_teacher(p, labels, emulation)
        return p

    p = teacher_probs(pb_s.x_adv)
    clean = teacher_probs(x)
    q = teacher_probs(pb_t.x_adv)
    score = tas_score(p, clean, q)
    is_tas = score >= 0.0  # boundary counts as transferable
    return TASReport(per_sample_score=score, is_tas=is_tas,
                     ratio=float(np.mean(is_tas)),
                     entropies=ad.entropy_rows(p))


def robust_overfitting(test_robust_acc_by_epoch) -> float:
    """Best minus last robust test accuracy over training."""
    curve = np.asarray(test_robust_acc_by_epoch, dtype=np.float64)
    if curve.size == 0:
        raise ContractError("robust_overfitting needs a non-empty curve")
    return float(curve.max() - curve[-1])


def lemma2_check(p_on_student_adv, teacher_adv, score, slack=1e-9) -> np.ndarray:
    """Entropy lower bound: score >= H(p) + log(min_i q_i), per sample."""
    p = ad.validate_prob_batch(p_on_student_adv)
    q = ad.validate_prob_batch(teacher_adv)
    score = np.asarray(score, dtype=np.float64)
    m = np.clip(q.min(axis=1), ad.PROB_FLOOR, None)
    bound = ad.entropy_rows(p) + np.log(m)
    return score >= bound - slack


def entropy_histogram(entropies, bins=50, n_classes=None) -> EntropyHistogram:
    """Equal-width density histogram over [0, log C], right-open except the
    last bin."""
    if bins < 1:
        raise ConfigError("bins must be >= 1")
    ent = np.asarray(entropies, dtype=np.float64)
    if n_classes is None:
        raise ConfigError("n_classes is required to span [0, log C]")
    hi = np.log(n_classes)
    counts, edges = np.histogram(ent, bins=bins, range=(0.0, hi))
    width = edges[1] - edges[0]
    total = counts.sum()
    density = counts / (total * width) if total > 0 else np.zeros_like(counts, float)
    return EntropyHistogram(bin_edges=edges, counts=counts, density=density)
