"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is recorded implicitly: every operation stores its parents and a
closure that pushes the upstream gradient back to them.  ``backward`` runs a
topological sweep from a scalar loss.  Everything is numpy under the hood and
all arithmetic is double precision.

Probability-vector helpers (softmax, KL, entropy, cross-entropy) live here
too, both as plain ndarray functions for diagnostics and as differentiable
graph operations for the losses.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

# Clamp applied inside every log so numerically one-hot rows stay finite.
PROB_FLOOR = 1e-12


class Tensor:
    """A node in the computation graph.

    ``data`` is a float64 ndarray; ``grad`` is an ndarray of the same shape
    once the node has participated in a backward pass (leaves with
    ``requires_grad`` start out with an all-zero grad).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``grad`` on every node reachable from this scalar."""
        if self.data.ndim != 0 and self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = []
        seen = set()

        def visit(node):
            stack = [(node, False)]
            while stack:
                n, done = stack.pop()
                if done:
                    order.append(n)
                    continue
                if id(n) in seen:
                    continue
                seen.add(id(n))
                stack.append((n, True))
                for p in n._parents:
                    stack.append((p, False))

        visit(self)
        for node in order:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_const(x):
    """Coerce a non-Tensor operand to a plain ndarray (treated as constant)."""
    return np.asarray(x, dtype=np.float64)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def bwd(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward = bwd
    return out


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_const(b)
        out = Tensor(a.data + c, _parents=(a,))
        out._backward = lambda g: a._accumulate(_unbroadcast(g, a.data.shape))
        return out
    out = Tensor(a.data + b.data, _parents=(a, b))

    def bwd(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = bwd
    return out


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -_as_const(b))
    return add(a, mul(b, -1.0))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_const(b)
        out = Tensor(a.data * c, _parents=(a,))
        out._backward = lambda g: a._accumulate(_unbroadcast(g * c, a.data.shape))
        return out
    out = Tensor(a.data * b.data, _parents=(a, b))

    def bwd(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bwd
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), _parents=(x,))
    mask = (x.data > 0.0).astype(np.float64)  # subgradient at 0 is 0
    out._backward = lambda g: x._accumulate(g * mask)
    return out


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data), _parents=(x,))
    out._backward = lambda g: x._accumulate(g * out.data)
    return out


def tsum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(x.data.sum(axis=axis), _parents=(x,))

    def bwd(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    out._backward = bwd
    return out


def tmean(x: Tensor) -> Tensor:
    return mul(tsum(x), 1.0 / x.data.size)


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax of a B x C logit matrix (max-shifted)."""
    if z.data.ndim != 2:
        raise DimensionError(f"log_softmax expects a 2-D batch, got {z.data.shape}")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("log_softmax: non-finite logits")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor(shifted - lse, _parents=(z,))
    probs = np.exp(out.data)

    def bwd(g):
        z._accumulate(g - probs * g.sum(axis=1, keepdims=True))

    out._backward = bwd
    return out


def softmax_t(z: Tensor) -> Tensor:
    """Differentiable row-wise softmax."""
    return exp(log_softmax(z))


def hook(x: Tensor, on_backward) -> Tensor:
    """Identity node whose backward invokes ``on_backward`` once per pass.

    Used to instrument how many backward sweeps traverse a subgraph (e.g.
    counting teacher backpropagations inside attacks).
    """
    out = Tensor(x.data, _parents=(x,))

    def bwd(g):
        on_backward()
        x._accumulate(g)

    out._backward = bwd
    return out


# -- plain probability-batch helpers (no graph) ----------------------------


def validate_prob_batch(p, atol=1e-9):
    """Check that each row of ``p`` lies on the probability simplex."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise DimensionError(f"probability batch must be 2-D, got {p.shape}")
    if np.any(p < -atol) or np.any(p > 1.0 + atol):
        raise ContractError("probability batch has entries outside [0, 1]")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > atol):
        raise ContractError("probability batch rows do not sum to 1")
    return p


def softmax_probs(z) -> np.ndarray:
    """Stable row-wise softmax of a plain logit array."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax: non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def kl_rows(p, q) -> np.ndarray:
    """Per-row KL(p || q) with clamped log arguments."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"kl: shape mismatch {p.shape} vs {q.shape}")
    pc = np.clip(p, PROB_FLOOR, None)
    qc = np.clip(q, PROB_FLOOR, None)
    return np.sum(p * (np.log(pc) - np.log(qc)), axis=-1)


def entropy_rows(p) -> np.ndarray:
    """Per-row Shannon entropy, in [0, log C]."""
    p = np.asarray(p, dtype=np.float64)
    pc = np.clip(p, PROB_FLOOR, None)
    return -np.sum(p * np.log(pc), axis=-1)


def log_softmax_np(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_rows(target, logits) -> np.ndarray:
    """Per-row -sum(target * log_softmax(logits)) on plain arrays."""
    target = np.asarray(target, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if target.shape != logits.shape:
        raise DimensionError(
            f"cross_entropy: shape mismatch {target.shape} vs {logits.shape}"
        )
    return -np.sum(target * log_softmax_np(logits), axis=-1)


# -- differentiable loss building blocks -----------------------------------


def cross_entropy_t(target, logits: Tensor) -> Tensor:
    """Per-row cross-entropy of a constant target against logit Tensor."""
    target = _as_const(target)
    if target.shape != logits.data.shape:
        raise DimensionError(
            f"cross_entropy: shape mismatch {target.shape} vs {logits.data.shape}"
        )
    return tsum(mul(log_softmax(logits), -target), axis=1)


def kl_const_target_t(target_probs, logits: Tensor) -> Tensor:
    """Per-row KL(target || softmax(logits)) with a constant target."""
    target = np.clip(_as_const(target_probs), PROB_FLOOR, None)
    if target.shape != logits.data.shape:
        raise DimensionError(
            f"kl: shape mismatch {target.shape} vs {logits.data.shape}"
        )
    const = np.sum(target * np.log(target), axis=1)
    return add(tsum(mul(log_softmax(logits), -target), axis=1), const)


def kl_t(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Per-row KL(softmax(p) || softmax(q)), differentiable through both."""
    if p_logits.data.shape != q_logits.data.shape:
        raise DimensionError(
            f"kl: shape mismatch {p_logits.data.shape} vs {q_logits.data.shape}"
        )
    lp = log_softmax(p_logits)
    lq = log_softmax(q_logits)
    return tsum(mul(exp(lp), sub(lp, lq)), axis=1)
