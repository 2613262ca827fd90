"""Training harness: the full outer loop for every supported method, with
SGD + momentum, a step LR schedule, stochastic weight averaging, and
per-epoch metrics capture.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, autodiff as ad, data, diagnostics, losses, models
from .attacks import AttackConfig
from .errors import ConfigError, ContractError, RunError
from .losses import DistillSpec
from .models import MlpParams, SwaState, TeacherEmulation

METRICS_FIELDS = (
    "epoch", "lr", "train_loss", "clean_train_acc", "clean_test_acc",
    "robust_train_acc", "robust_test_acc", "mean_weight", "tas_ratio",
)


@dataclass
class MetricsRecord:
    rows: list = field(default_factory=list)

    def append(self, **kwargs):
        row = {k: kwargs.get(k, float("nan")) for k in METRICS_FIELDS}
        self.rows.append(row)

    def column(self, name):
        return [row[name] for row in self.rows]


@dataclass(frozen=True)
class TrainConfig:
    student_layers: tuple[int, ...]  # hidden widths; in/out come from the data
    epochs: int
    train_attack: AttackConfig
    eval_attack: AttackConfig
    distill: DistillSpec
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 10.0
    swa_start_epoch: int | None = None  # 1-based; None = 0.475 * epochs
    seed: int = 0
    tas_every: int = 0  # 0 disables the periodic TAS audit
    eval_train_robust: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        dec = tuple(self.lr_decay_epochs)
        if any(b <= a for a, b in zip(dec, dec[1:])):
            raise ConfigError("lr_decay_epochs must be strictly increasing")
        if any(e < 0 or e >= max(self.epochs, 1) for e in dec):
            raise ConfigError("lr_decay_epochs must lie in [0, epochs)")
        if self.swa_start_epoch is not None and self.swa_start_epoch > self.epochs:
            raise ConfigError("swa_start_epoch must be <= epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def swa_start(self) -> int:
        if self.swa_start_epoch is not None:
            return self.swa_start_epoch
        return int(round(0.475 * self.epochs))


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Piecewise-constant schedule: divide by the decay factor at each
    configured epoch (0-based)."""
    if epoch < 0 or epoch >= max(config.epochs, 1):
        raise ContractError(f"epoch {epoch} outside [0, {config.epochs})")
    n_decays = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.lr / (config.lr_decay_factor ** n_decays)


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        if not np.all(np.isfinite(g)):
            raise RunError("non-finite gradient in SGD step")
        v = momentum * v + g + weight_decay * p
        new_params.append(p - lr * v)
        new_velocity.append(v)
    return new_params, new_velocity


class EmulatedTeacher:
    """A trained teacher plus an output transform (sharpening/interpolation).

    Attacks use the raw network; the emulation shapes only the supervision
    signal (probabilities, logits handed to the losses, entropy weights).
    """

    def __init__(self, params: MlpParams, emulation: TeacherEmulation | None = None):
        self.params = params
        self.emulation = emulation or TeacherEmulation()

    @property
    def is_plain(self):
        return self.emulation.mode == "as-trained"

    def probs(self, x, labels) -> np.ndarray:
        p = ad.softmax_probs(models.forward(self.params, x))
        if self.is_plain:
            return p
        return models.emulate_teacher(p, labels, self.emulation)

    def logits(self, x, labels) -> np.ndarray:
        raw = models.forward(self.params, x)
        return self.emulate_logits(raw, labels)

    def emulate_logits(self, raw_logits, labels) -> np.ndarray:
        if self.is_plain:
            return raw_logits
        p = models.emulate_teacher(ad.softmax_probs(raw_logits), labels,
                                   self.emulation)
        return np.log(np.clip(p, ad.PROB_FLOOR, None))


def as_teacher(teacher) -> EmulatedTeacher:
    if isinstance(teacher, EmulatedTeacher):
        return teacher
    return EmulatedTeacher(models.model_params(teacher))


_INNER_OF = {
    "pgd-at": "ce-student",
    "ard": "ce-student",
    "trades": "kl-student-clean",
    "rslad": "kl-teacher-clean",
    "adaad": "kl-teacher-adv",
    "igdm": "kl-teacher-adv",
    "saad": "fast-first-order",
    "saad-c": "fast-first-order",
}


def _batch_seed(seed, epoch, batch) -> int:
    return int(np.random.SeedSequence(entropy=(seed, epoch, batch))
               .generate_state(1)[0])


def _needs_teacher(method):
    return method not in ("pgd-at", "trades")


def train(teacher, dataset: data.Dataset, config: TrainConfig):
    """Run the selected method end to end.

    Returns ``(student, swa_student, metrics)``.  The SWA student is the
    running mean of per-epoch snapshots from ``swa_start`` on (or the final
    student if no snapshot was taken).  Deterministic per seed.
    """
    spec = config.distill
    if _needs_teacher(spec.method) and teacher is None:
        raise ConfigError(f"method {spec.method!r} requires a teacher")
    emu_teacher = as_teacher(teacher) if teacher is not None else None
    c = dataset.n_classes
    sizes = (dataset.n_features, *config.student_layers, c)
    student = models.init_mlp(sizes, config.seed)
    params = [a.copy() for pair in zip(student.weights, student.biases)
              for a in pair]
    velocity = [np.zeros_like(p) for p in params]
    metrics = MetricsRecord()
    swa = SwaState()
    inner = _INNER_OF[spec.method]
    x_all, y_all = dataset.x_train, dataset.y_train

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = np.random.default_rng(
            np.random.SeedSequence(entropy=(config.seed, 1, epoch))
        ).permutation(x_all.shape[0])
        epoch_losses = []
        epoch_weights = []
        for bi, start in enumerate(range(0, x_all.shape[0], config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            yb_onehot = data.onehot(yb, c)
            snapshot = MlpParams(sizes, tuple(params[0::2]), tuple(params[1::2]))
            cfg = replace(config.train_attack, inner_loss=inner,
                          seed=_batch_seed(config.seed, epoch, bi))
            params_t = models.param_tensors_of(snapshot, requires_grad=True)

            t_clean_logits_e = None
            if spec.method in ("saad", "saad-c"):
                raw_logits, g = attacks.teacher_linearization(
                    emu_teacher.params, xb, yb)
                t_clean_logits_e = emu_teacher.emulate_logits(raw_logits, yb)
                pb = attacks.fast_inner_max(snapshot, t_clean_logits_e, g, xb, yb,
                                            cfg, lambda_in=spec.lambda_in)
            elif inner in ("kl-teacher-clean", "kl-teacher-adv"):
                pb = attacks.pgd(snapshot, emu_teacher.params, xb, yb_onehot, cfg)
            else:
                pb = attacks.pgd(snapshot, None, xb, yb_onehot, cfg)

            if spec.method == "pgd-at":
                loss = losses.pgd_at_loss(snapshot, pb.x_adv, yb_onehot,
                                          student_params_t=params_t)
            elif spec.method == "trades":
                loss = losses.trades_loss(snapshot, xb, pb.x_adv, yb_onehot,
                                          spec.trades_lambda,
                                          student_params_t=params_t)
            else:
                if t_clean_logits_e is None:
                    t_clean_logits_e = emu_teacher.logits(xb, yb)
                t_adv_logits_e = emu_teacher.logits(pb.x_adv, yb)
                base = losses.ad_loss_from_teacher_logits(
                    snapshot, t_clean_logits_e, t_adv_logits_e, xb, pb.x_adv,
                    spec, student_params_t=params_t)
                t_adv_probs = ad.softmax_probs(t_adv_logits_e)
                if spec.method in ("saad", "saad-c"):
                    if spec.weighting == "entropy":
                        w = losses.entropy_weights(t_adv_probs)
                    else:
                        w = losses.unit_weights(len(yb), c)
                    epoch_weights.extend(w.w.tolist())
                    loss = losses.saad_loss(base, w)
                    # beta = 0 degenerates exactly to the weighted loss, so
                    # the clean forward is skipped to keep the equality bitwise
                    if spec.method == "saad-c" and spec.beta > 0.0:
                        clean_kl = ad.kl_const_target_t(
                            emu_teacher.probs(xb, yb),
                            models.forward_t(snapshot, ad.Tensor(xb),
                                             param_tensors=params_t))
                        inv = 1.0 - w.w_tilde
                        loss = ad.add(loss, ad.mul(
                            ad.tmean(ad.mul(clean_kl, inv)), spec.beta))
                else:
                    epoch_weights.extend(
                        ad.entropy_rows(t_adv_probs).tolist())
                    loss = ad.tmean(base)

            loss_val = float(loss.data)
            epoch_losses.append(loss_val)
            if np.isfinite(loss_val):
                loss.backward()
                grads = [t.grad for t in params_t]
                params, velocity = sgd_step(params, grads, velocity, lr,
                                            config.momentum, config.weight_decay)

        if epoch_losses and not any(np.isfinite(v) for v in epoch_losses):
            raise RunError(f"training diverged: non-finite loss for all of "
                           f"epoch {epoch}")

        student = MlpParams(sizes, tuple(params[0::2]), tuple(params[1::2]))
        train_eval = evaluate(student, x_all, y_all, config.eval_attack,
                              with_pgd=config.eval_train_robust)
        test_eval = evaluate(student, dataset.x_test, dataset.y_test,
                             config.eval_attack)
        tas = float("nan")
        if (config.tas_every > 0 and emu_teacher is not None
                and (epoch + 1) % config.tas_every == 0):
            tas = _tas_audit(student, emu_teacher, dataset, config).ratio
        metrics.append(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
            clean_train_acc=train_eval["clean_acc"],
            clean_test_acc=test_eval["clean_acc"],
            robust_train_acc=train_eval["pgd_acc"],
            robust_test_acc=test_eval["pgd_acc"],
            mean_weight=(float(np.mean(epoch_weights)) if epoch_weights
                         else float("nan")),
            tas_ratio=tas,
        )
        if epoch + 1 >= config.swa_start:
            swa = models.swa_update(swa, student)

    swa_student = swa.averaged if swa.count > 0 else student
    return student, swa_student, metrics


def _tas_audit(student, emu_teacher, dataset, config, cap=256):
    x = dataset.x_train[:cap]
    y = dataset.y_train[:cap]
    cfg_s = replace(config.eval_attack, inner_loss="ce-student")
    return diagnostics.tas_ratio(student, emu_teacher.params, x, y,
                                 cfg_s, cfg_s, emulation=emu_teacher.emulation)


def evaluate(model, x, y, eval_attack: AttackConfig, with_pgd=True):
    """Clean / FGSM / PGD accuracy (percent) under the evaluation attack."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    params = models.model_params(model)
    yo = data.onehot(y, params.n_classes)
    out = {"clean_acc": _acc(models.forward(params, x), y)}
    if with_pgd:
        cfg = replace(eval_attack, inner_loss="ce-student")
        out["fgsm_acc"] = _acc(
            models.forward(params, attacks.fgsm(params, x, yo, cfg).x_adv), y)
        out["pgd_acc"] = _acc(
            models.forward(params, attacks.pgd(params, None, x, yo, cfg).x_adv), y)
    else:
        out["fgsm_acc"] = float("nan")
        out["pgd_acc"] = float("nan")
    return out


def _acc(logits, y) -> float:
    pred = np.argmax(logits, axis=1)  # ties resolve to the lowest index
    return float(100.0 * np.mean(pred == np.asarray(y)))
