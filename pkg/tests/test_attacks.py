"""Attack correctness: closed-form checks on linear models, ball/box
invariants, and the fast first-order inner maximization contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adlab import AttackConfig, fast_inner_max, fgsm, init_mlp, pgd
from adlab import autodiff as ad
from adlab.attacks import (check_perturbation, project_linf,
                           teacher_linearization)
from adlab.data import onehot
from adlab.errors import ConfigError
from adlab.models import InstrumentedMlp, MlpParams, forward


def linear_model(seed, d=4, c=3):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(c, d))
    b = rng.normal(size=c)
    return MlpParams((d, c), (w,), (b,))


def test_attack_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=-0.1, step_size=0.1, steps=1)
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=0.1, step_size=0.0, steps=2)
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=0.1, step_size=0.1, steps=1, inner_loss="wat")
    with pytest.raises(ConfigError):
        AttackConfig(epsilon=0.1, step_size=0.1, steps=1, input_box=(1.0, 0.0))


def test_project_linf_oracle():
    d = np.array([-0.5, -0.1, 0.0, 0.1, 0.5])
    assert np.allclose(project_linf(d, 0.2), [-0.2, -0.1, 0.0, 0.1, 0.2])


def test_fgsm_closed_form_linear():
    # CE gradient wrt x for a linear model is W^T (p - y); FGSM takes
    # epsilon * sign of it.
    m = linear_model(0)
    rng = np.random.default_rng(1)
    x = rng.uniform(0.3, 0.7, size=(6, 4))
    y = rng.integers(0, 3, size=6)
    yo = onehot(y, 3)
    cfg = AttackConfig(epsilon=0.05, step_size=0.05, steps=1,
                       input_box=(-10.0, 10.0))
    pb = fgsm(m, x, yo, cfg)
    p = ad.softmax_probs(forward(m, x))
    expect = cfg.epsilon * np.sign((p - yo) @ m.weights[0])
    # delta is recovered as (x + delta) - x after the box clamp, which costs
    # one rounding step
    assert np.allclose(pb.delta, expect, atol=1e-12)


def test_pgd_first_step_closed_form_linear():
    m = linear_model(2)
    rng = np.random.default_rng(3)
    x = rng.uniform(0.3, 0.7, size=(8, 4))
    y = rng.integers(0, 3, size=8)
    yo = onehot(y, 3)
    cfg = AttackConfig(epsilon=0.05, step_size=0.01, steps=1, init_scale=0.0,
                       input_box=(-10.0, 10.0))
    pb = pgd(m, None, x, yo, cfg)
    p = ad.softmax_probs(forward(m, x))
    expect = cfg.step_size * np.sign((p - yo) @ m.weights[0])
    assert np.allclose(pb.delta, expect, atol=1e-12)


def test_pgd_increases_inner_loss():
    m = init_mlp((4, 16, 3), 0)
    rng = np.random.default_rng(4)
    x = rng.uniform(0.2, 0.8, size=(12, 4))
    yo = onehot(rng.integers(0, 3, size=12), 3)
    cfg = AttackConfig(epsilon=0.1, step_size=0.02, steps=8, init_scale=0.0)
    pb = pgd(m, None, x, yo, cfg)
    assert pb.loss_trace[-1] >= pb.loss_trace[0]


@settings(deadline=None, max_examples=40)
@given(st.integers(0, 2 ** 31), st.floats(0.005, 0.2), st.integers(0, 4),
       st.sampled_from(["ce-student", "kl-student-clean"]))
def test_pgd_ball_box_invariants(seed, eps, steps, inner):
    rng = np.random.default_rng(seed)
    m = init_mlp((3, 8, 2), seed % 100)
    x = rng.uniform(0.0, 1.0, size=(5, 3))
    yo = onehot(rng.integers(0, 2, size=5), 2)
    cfg = AttackConfig(epsilon=eps, step_size=eps / 3, steps=steps,
                       inner_loss=inner, seed=seed)
    pb = pgd(m, None, x, yo, cfg)
    check_perturbation(pb, x, cfg)


def test_pgd_deterministic_per_seed():
    m = init_mlp((3, 8, 2), 0)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, size=(4, 3))
    yo = onehot(rng.integers(0, 2, size=4), 2)
    cfg = AttackConfig(epsilon=0.05, step_size=0.01, steps=5, seed=7)
    a = pgd(m, None, x, yo, cfg)
    b = pgd(m, None, x, yo, cfg)
    assert np.array_equal(a.x_adv, b.x_adv)


def test_pgd_teacher_losses_require_teacher():
    m = init_mlp((3, 2), 0)
    cfg = AttackConfig(epsilon=0.05, step_size=0.01, steps=1,
                       inner_loss="kl-teacher-clean")
    with pytest.raises(ConfigError):
        pgd(m, None, np.zeros((1, 3)), np.eye(2)[[0]], cfg)


# -- teacher linearization and the fast attack ------------------------------


def test_linearization_exact_on_linear_teacher():
    m = linear_model(6)
    rng = np.random.default_rng(7)
    x = rng.uniform(0.2, 0.8, size=(5, 4))
    labels = rng.integers(0, 3, size=5)
    logits, g = teacher_linearization(m, x, labels)
    assert np.allclose(logits, forward(m, x), atol=1e-12)
    # gradient of logit_y wrt x is row y of W, for every sample
    assert np.allclose(g, m.weights[0][labels], atol=1e-12)


def test_fast_attack_corrected_logit_matches_linear_teacher():
    teacher = linear_model(8)
    student = init_mlp((4, 8, 3), 1)
    rng = np.random.default_rng(9)
    x = rng.uniform(0.2, 0.8, size=(6, 4))
    labels = rng.integers(0, 3, size=6)
    cfg = AttackConfig(epsilon=0.05, step_size=0.01, steps=5, seed=3)
    t_logits, g = teacher_linearization(teacher, x, labels)
    pb = fast_inner_max(student, t_logits, g, x, labels, cfg, lambda_in=1.0)
    rows = np.arange(6)
    corrected = t_logits[rows, labels] + np.sum(g * pb.delta, axis=1)
    true_logits = forward(teacher, pb.x_adv)[rows, labels]
    assert np.max(np.abs(corrected - true_logits)) < 1e-10


def test_fast_attack_lambda_zero_bitwise_equals_pgd_teacher_clean():
    teacher = init_mlp((4, 16, 3), 2)
    student = init_mlp((4, 8, 3), 3)
    rng = np.random.default_rng(10)
    x = rng.uniform(0.1, 0.9, size=(7, 4))
    labels = rng.integers(0, 3, size=7)
    cfg = AttackConfig(epsilon=0.06, step_size=0.015, steps=6, seed=11,
                       inner_loss="kl-teacher-clean")
    ref = pgd(student, teacher, x, onehot(labels, 3), cfg)
    t_logits, g = teacher_linearization(teacher, x, labels)
    fast = fast_inner_max(student, t_logits, g, x, labels, cfg, lambda_in=0.0)
    assert np.array_equal(ref.x_adv, fast.x_adv)
    assert ref.loss_trace == fast.loss_trace


def test_fast_attack_teacher_cost_is_one_pass():
    teacher = InstrumentedMlp(init_mlp((4, 16, 3), 4))
    student = init_mlp((4, 8, 3), 5)
    rng = np.random.default_rng(12)
    x = rng.uniform(0.1, 0.9, size=(5, 4))
    labels = rng.integers(0, 3, size=5)
    k = 7
    cfg = AttackConfig(epsilon=0.05, step_size=0.01, steps=k, seed=0)
    t_logits, g = teacher_linearization(teacher, x, labels)
    fast_inner_max(student, t_logits, g, x, labels, cfg)
    assert (teacher.n_forward, teacher.n_backward) == (1, 1)

    multi = InstrumentedMlp(init_mlp((4, 16, 3), 4))
    cfg_adv = AttackConfig(epsilon=0.05, step_size=0.01, steps=k, seed=0,
                           inner_loss="kl-teacher-adv")
    pgd(student, multi, x, onehot(labels, 3), cfg_adv)
    assert (multi.n_forward, multi.n_backward) == (k, k)


def test_zero_steps_returns_clamped_init():
    m = init_mlp((3, 2), 0)
    x = np.full((2, 3), 0.5)
    cfg = AttackConfig(epsilon=0.1, step_size=0.02, steps=0, init_scale=0.0)
    pb = pgd(m, None, x, onehot([0, 1], 2), cfg)
    assert np.array_equal(pb.x_adv, x)
    assert pb.loss_trace == []
