"""Sklearn-style estimator wrappers."""

import numpy as np
import pytest

from adlab import AdversarialDistiller, RobustMlpClassifier
from adlab.errors import ConfigError


@pytest.fixture(scope="module")
def xy(small_dataset_module=None):
    from adlab import DatasetSpec, gen_dataset
    ds = gen_dataset(DatasetSpec(kind="gaussian-mixture", dims=2, classes=2,
                                 samples_per_class=40, class_margin=0.15,
                                 seed=2))
    return ds.x_train, ds.y_train, ds.x_test, ds.y_test


def test_classifier_fit_predict(xy):
    X, y, Xt, yt = xy
    clf = RobustMlpClassifier(hidden_layers=(16,), epochs=10, epsilon=0.02,
                              attack_steps=3, lr=0.1, seed=0)
    clf.fit(X, y)
    proba = clf.predict_proba(Xt)
    assert proba.shape == (Xt.shape[0], 2)
    assert np.allclose(proba.sum(axis=1), 1.0)
    assert clf.score(Xt, yt) > 0.6
    assert np.array_equal(clf.classes_, [0, 1])


def test_classifier_rejects_distillation_method(xy):
    X, y, *_ = xy
    with pytest.raises(ConfigError):
        RobustMlpClassifier(method="saad", epochs=1).fit(X, y)


def test_classifier_unfitted_raises(xy):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        RobustMlpClassifier().predict(xy[0])


def test_distiller_needs_teacher(xy):
    X, y, *_ = xy
    with pytest.raises(ConfigError):
        AdversarialDistiller(epochs=1).fit(X, y)


def test_distiller_fit_and_params(xy):
    X, y, Xt, yt = xy
    teacher = RobustMlpClassifier(hidden_layers=(16,), epochs=4, epsilon=0.02,
                                  attack_steps=3, lr=0.05, seed=1).fit(X, y)
    dist = AdversarialDistiller(teacher=teacher, hidden_layers=(8,),
                                method="saad-c", beta=0.2, epochs=2,
                                epsilon=0.02, attack_steps=3, seed=0)
    dist.fit(X, y)
    assert dist.predict(Xt).shape == (Xt.shape[0],)
    params = dist.get_params(deep=False)
    assert params["beta"] == 0.2
    clone = AdversarialDistiller(**params)
    assert clone.get_params(deep=False)["method"] == "saad-c"


def test_get_set_params_roundtrip():
    clf = RobustMlpClassifier()
    clf.set_params(epochs=3, epsilon=0.1)
    assert clf.get_params()["epochs"] == 3
    assert clf.get_params()["epsilon"] == 0.1
