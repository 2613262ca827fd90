"""adlab: a desk-scale adversarial distillation laboratory."""

from .attacks import AttackConfig, PerturbedBatch, fast_inner_max, fgsm, pgd
from .data import Dataset, DatasetSpec, gen_dataset, load_idx
from .diagnostics import (entropy_histogram, lemma2_check, robust_overfitting,
                          tas_ratio, tas_score)
from .estimator import AdversarialDistiller, RobustMlpClassifier
from .losses import DistillSpec, entropy_weights, saad_loss, saadc_loss
from .models import (MlpParams, TeacherEmulation, init_mlp, load_checkpoint,
                     save_checkpoint, swa_update)
from .training import EmulatedTeacher, MetricsRecord, TrainConfig, evaluate, train
from .variance import SplitPlan, VarianceReport, decompose_point, estimate_avar

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "PerturbedBatch", "fast_inner_max", "fgsm", "pgd",
    "Dataset", "DatasetSpec", "gen_dataset", "load_idx",
    "entropy_histogram", "lemma2_check", "robust_overfitting", "tas_ratio",
    "tas_score", "AdversarialDistiller", "RobustMlpClassifier",
    "DistillSpec", "entropy_weights", "saad_loss", "saadc_loss",
    "MlpParams", "TeacherEmulation", "init_mlp", "load_checkpoint",
    "save_checkpoint", "swa_update", "EmulatedTeacher", "MetricsRecord",
    "TrainConfig", "evaluate", "train", "SplitPlan", "VarianceReport",
    "decompose_point", "estimate_avar", "__version__",
]
