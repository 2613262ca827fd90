"""Gradient correctness against central finite differences, plus oracles for
the probability helpers."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adlab import autodiff as ad
from adlab.autodiff import Tensor
from adlab.errors import ContractError, DimensionError, NumericError


def fd_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at ndarray x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def check_grad(build, x, tol=1e-6):
    """build(tensor) -> scalar Tensor; compare backward grad with FD."""
    t = Tensor(x, requires_grad=True)
    build(t).backward()
    num = fd_grad(lambda v: float(build(Tensor(v)).data), x)
    assert np.max(rel_err(t.grad, num)) < tol, (t.grad, num)


def test_matmul_grad_fd():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        check_grad(lambda t: ad.tsum(ad.mul(ad.matmul(t, Tensor(b)), 1.3)), a)
        check_grad(lambda t: ad.tsum(ad.matmul(Tensor(a), t)), b)


def test_add_mul_broadcast_grad_fd():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    ad.tsum(ad.mul(ad.add(ta, tb), ad.add(ta, tb))).backward()
    num_a = fd_grad(lambda v: float(((v + b) ** 2).sum()), a)
    num_b = fd_grad(lambda v: float(((a + v) ** 2).sum()), b)
    assert np.max(rel_err(ta.grad, num_a)) < 1e-6
    assert np.max(rel_err(tb.grad, num_b)) < 1e-6


def test_relu_exp_grad_fd():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the ReLU kink
    check_grad(lambda t: ad.tsum(ad.relu(t)), x)
    check_grad(lambda t: ad.tsum(ad.exp(ad.mul(t, 0.3))), x)


def test_sum_mean_axis_grad_fd():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 5))
    check_grad(lambda t: ad.tsum(ad.mul(ad.tsum(t, axis=1),
                                        np.arange(4.0))), x)
    check_grad(lambda t: ad.tmean(ad.mul(t, t)), x)


def test_log_softmax_grad_fd():
    rng = np.random.default_rng(4)
    for _ in range(5):
        z = rng.normal(size=(4, 6)) * 3
        w = rng.normal(size=(4, 6))
        check_grad(lambda t: ad.tsum(ad.mul(ad.log_softmax(t), w)), z)


def test_composite_loss_grad_fd():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(3, 5))
    y = np.eye(5)[[0, 2, 4]]
    target = rng.dirichlet(np.ones(5), size=3)
    check_grad(lambda t: ad.tsum(ad.cross_entropy_t(y, t)), z)
    check_grad(lambda t: ad.tsum(ad.kl_const_target_t(target, t)), z)
    z2 = rng.normal(size=(3, 5))
    ta = Tensor(z, requires_grad=True)
    tb = Tensor(z2, requires_grad=True)
    ad.tsum(ad.kl_t(ta, tb)).backward()
    num_a = fd_grad(lambda v: float(ad.kl_rows(
        ad.softmax_probs(v), ad.softmax_probs(z2)).sum()), z)
    num_b = fd_grad(lambda v: float(ad.kl_rows(
        ad.softmax_probs(z), ad.softmax_probs(v)).sum()), z2)
    assert np.max(rel_err(ta.grad, num_a)) < 1e-5
    assert np.max(rel_err(tb.grad, num_b)) < 1e-5


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        Tensor(np.zeros((2, 2))).backward()


def test_backward_resets_between_graphs():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    ad.tsum(ad.mul(x, 2.0)).backward()
    first = x.grad.copy()
    x.zero_grad()
    ad.tsum(ad.mul(x, 2.0)).backward()
    assert np.array_equal(x.grad, first)


def test_diamond_graph_accumulates():
    # y = x*x + x*x: grad must be 4x, not 2x
    x = Tensor(np.array([[3.0]]), requires_grad=True)
    y = ad.mul(x, x)
    ad.tsum(ad.add(y, y)).backward()
    assert x.grad[0, 0] == pytest.approx(12.0)


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_log_softmax_rejects_nonfinite():
    with pytest.raises(NumericError):
        ad.log_softmax(Tensor(np.array([[np.inf, 0.0]])))


def test_hook_fires_once_per_backward():
    calls = []
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    out = ad.hook(ad.mul(x, 3.0), lambda: calls.append(1))
    ad.tsum(out).backward()
    assert len(calls) == 1
    assert np.array_equal(x.grad, np.full((2, 2), 3.0))


# -- probability helpers ----------------------------------------------------


def test_softmax_oracle():
    z = np.array([[1.0, 2.0, 3.0], [1000.0, 1000.0, 1000.0]])
    p = ad.softmax_probs(z)
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(p[0], e / e.sum())
    assert np.allclose(p[1], 1.0 / 3.0)


def test_kl_direct_sum_oracle():
    rng = np.random.default_rng(6)
    p = rng.dirichlet(np.ones(4), size=10)
    q = rng.dirichlet(np.ones(4), size=10)
    expect = np.array([sum(pi * (np.log(pi) - np.log(qi))
                           for pi, qi in zip(prow, qrow))
                       for prow, qrow in zip(p, q)])
    assert np.allclose(ad.kl_rows(p, q), expect, atol=1e-12)


def test_entropy_uniform_and_onehot():
    c = 7
    uni = np.full((1, c), 1.0 / c)
    assert ad.entropy_rows(uni)[0] == pytest.approx(np.log(c))
    hot = np.eye(c)[[2]]
    assert abs(ad.entropy_rows(hot)[0]) < 1e-10


def test_cross_entropy_rows_oracle():
    z = np.array([[0.2, -1.0, 0.5]])
    y = np.eye(3)[[2]]
    expect = -ad.log_softmax_np(z)[0, 2]
    assert ad.cross_entropy_rows(y, z)[0] == pytest.approx(expect, abs=1e-12)


@settings(deadline=None, max_examples=50)
@given(arrays(np.float64, (4, 5),
              elements=st.floats(-20, 20, allow_nan=False)))
def test_softmax_is_simplex(z):
    p = ad.softmax_probs(z)
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2 ** 31))
def test_kl_nonnegative_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(5), size=6)
    q = rng.dirichlet(np.ones(5), size=6)
    assert np.all(ad.kl_rows(p, q) >= -1e-12)
    assert np.all(np.abs(ad.kl_rows(p, p)) < 1e-10)


def test_validate_prob_batch_rejects():
    with pytest.raises(ContractError):
        ad.validate_prob_batch(np.array([[0.5, 0.6]]))
    with pytest.raises(DimensionError):
        ad.validate_prob_batch(np.ones(3))
