import numpy as np
import pytest

from adlab import (AttackConfig, DatasetSpec, DistillSpec, TrainConfig,
                   gen_dataset, train)
from adlab.training import EmulatedTeacher


@pytest.fixture(scope="session")
def small_dataset():
    spec = DatasetSpec(kind="gaussian-mixture", dims=2, classes=3,
                       samples_per_class=60, class_margin=0.12, seed=11)
    return gen_dataset(spec)


@pytest.fixture(scope="session")
def train_attack():
    return AttackConfig(epsilon=0.03, step_size=0.0075, steps=5)


@pytest.fixture(scope="session")
def eval_attack():
    return AttackConfig(epsilon=0.03, step_size=0.0075, steps=10,
                        init_scale=0.0)


@pytest.fixture(scope="session")
def small_teacher(small_dataset, train_attack, eval_attack):
    cfg = TrainConfig(student_layers=(32, 32), epochs=8,
                      train_attack=train_attack, eval_attack=eval_attack,
                      distill=DistillSpec(method="pgd-at"), batch_size=32,
                      lr=0.05, seed=5, eval_train_robust=False)
    params, _, _ = train(None, small_dataset, cfg)
    return EmulatedTeacher(params)
