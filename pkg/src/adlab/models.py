"""Multilayer-perceptron classifiers, teacher emulation, SWA, checkpoints.

Both teacher and student are plain MLPs (affine -> ReLU repeated, final
affine produces logits).  Parameters are immutable snapshots: training and
SWA always build new ``MlpParams``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, FormatError

CHECKPOINT_MAGIC = b"ADLB"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpParams:
    """Weights/biases of an MLP with layer widths ``layer_sizes``."""

    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]  # layer i: (d_{i+1}, d_i)
    biases: tuple[np.ndarray, ...]  # layer i: (d_{i+1},)

    def __post_init__(self):
        sizes = self.layer_sizes
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ConfigError(f"invalid layer sizes {sizes}")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise DimensionError("layer count mismatch between sizes and params")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise DimensionError(f"layer {i} has shape {w.shape}/{b.shape}, "
                                     f"expected ({sizes[i + 1]}, {sizes[i]})")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractError(f"layer {i} contains non-finite entries")

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases)
                               for a in pair])


def init_mlp(layer_sizes, seed) -> MlpParams:
    """Scaled-uniform init: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or any(s <= 0 for s in sizes):
        raise ConfigError(f"need >= 2 positive layer sizes, got {layer_sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        scale = 1.0 / np.sqrt(d_in)
        weights.append(rng.uniform(-scale, scale, size=(d_out, d_in)))
        biases.append(np.zeros(d_out))
    return MlpParams(sizes, tuple(weights), tuple(biases))


def forward(model: MlpParams, x) -> np.ndarray:
    """Logits for a plain input batch (no graph recorded)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise DimensionError(
            f"input width {x.shape} does not match model width {model.n_features}"
        )
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def forward_t(model: MlpParams, x: Tensor,
              param_tensors: list[Tensor] | None = None) -> Tensor:
    """Graph-recording forward pass.

    ``param_tensors`` may supply requires-grad Tensors for the weights and
    biases (interleaved W0, b0, W1, b1, ...) so the caller can read their
    gradients after backward; otherwise parameters are constants.
    """
    if x.data.ndim != 2 or x.data.shape[1] != model.n_features:
        raise DimensionError(
            f"input width {x.data.shape} does not match model width {model.n_features}"
        )
    if param_tensors is None:
        param_tensors = param_tensors_of(model, requires_grad=False)
    h = x
    last = len(model.weights) - 1
    for i in range(len(model.weights)):
        w, b = param_tensors[2 * i], param_tensors[2 * i + 1]
        wt = Tensor(w.data.T, _parents=(w,))
        wt._backward = lambda g, w=w: w._accumulate(g.T)
        h = ad.add(ad.matmul(h, wt), b)
        if i != last:
            h = ad.relu(h)
    return h


def param_tensors_of(model: MlpParams, requires_grad=True) -> list[Tensor]:
    out = []
    for w, b in zip(model.weights, model.biases):
        out.append(Tensor(w, requires_grad=requires_grad))
        out.append(Tensor(b, requires_grad=requires_grad))
    return out


def params_from_tensors(layer_sizes, tensors) -> MlpParams:
    weights = tuple(t.data.copy() for t in tensors[0::2])
    biases = tuple(t.data.copy() for t in tensors[1::2])
    return MlpParams(tuple(layer_sizes), weights, biases)


def predict_probs(model: MlpParams, x) -> np.ndarray:
    return ad.softmax_probs(forward(model, x))


class InstrumentedMlp:
    """MLP wrapper counting forward and backward passes through the model.

    Attacks accept either ``MlpParams`` or this wrapper wherever a teacher or
    student model is expected; tests use the counters to assert how many
    teacher evaluations an attack performs.
    """

    def __init__(self, params: MlpParams):
        self.params = params
        self.n_forward = 0
        self.n_backward = 0

    @property
    def n_classes(self):
        return self.params.n_classes

    @property
    def n_features(self):
        return self.params.n_features

    def logits(self, x) -> np.ndarray:
        self.n_forward += 1
        return forward(self.params, x)

    def logits_t(self, x: Tensor) -> Tensor:
        self.n_forward += 1
        out = forward_t(self.params, x)
        return ad.hook(out, self._count_backward)

    def _count_backward(self):
        self.n_backward += 1


def model_logits(model, x) -> np.ndarray:
    if isinstance(model, InstrumentedMlp):
        return model.logits(x)
    return forward(model, x)


def model_logits_t(model, x: Tensor) -> Tensor:
    if isinstance(model, InstrumentedMlp):
        return model.logits_t(x)
    return forward_t(model, x)


def model_params(model) -> MlpParams:
    return model.params if isinstance(model, InstrumentedMlp) else model


# -- teacher emulation ------------------------------------------------------

EMULATION_MODES = ("as-trained", "temperature-sharpened", "label-interpolated")


@dataclass(frozen=True)
class TeacherEmulation:
    """How to post-process a trained teacher's probabilities.

    ``temperature-sharpened`` rescales log-probabilities by 1/temperature;
    ``label-interpolated`` mixes in the one-hot ground truth with weight
    ``alpha`` (alpha = 1 is purely one-hot).
    """

    mode: str = "as-trained"
    temperature: float = 1.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.mode not in EMULATION_MODES:
            raise ConfigError(f"unknown emulation mode {self.mode!r}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")


def emulate_teacher(probs, labels, emu: TeacherEmulation) -> np.ndarray:
    probs = ad.validate_prob_batch(probs)
    if emu.mode == "as-trained":
        return probs
    if emu.mode == "temperature-sharpened":
        logp = np.log(np.clip(probs, ad.PROB_FLOOR, None))
        return ad.softmax_probs(logp / emu.temperature)
    labels = np.asarray(labels)
    c = probs.shape[1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise ConfigError(f"labels must lie in [0, {c})")
    onehot = np.eye(c)[labels]
    return (1.0 - emu.alpha) * probs + emu.alpha * onehot


# -- stochastic weight averaging -------------------------------------------


@dataclass
class SwaState:
    averaged: MlpParams | None = None
    count: int = 0


def swa_update(state: SwaState, snapshot: MlpParams) -> SwaState:
    """Running arithmetic mean of parameter snapshots."""
    if state.count == 0:
        return SwaState(averaged=snapshot, count=1)
    avg = state.averaged
    if avg.layer_sizes != snapshot.layer_sizes:
        raise ContractError("snapshot layer sizes do not match SWA state")
    k = state.count
    weights = tuple((k * aw + sw) / (k + 1)
                    for aw, sw in zip(avg.weights, snapshot.weights))
    biases = tuple((k * ab + sb) / (k + 1)
                   for ab, sb in zip(avg.biases, snapshot.biases))
    return SwaState(MlpParams(avg.layer_sizes, weights, biases), k + 1)


# -- checkpoint persistence -------------------------------------------------
#
# Layout: magic "ADLB" | u32 LE version (1) | u32 LE layer count L |
# (L+1) x u32 LE layer sizes | per layer: weight matrix row-major then bias,
# all f64 LE. No padding.


def save_checkpoint(model: MlpParams, path):
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    n_layers = len(model.weights)
    buf += struct.pack("<II", CHECKPOINT_VERSION, n_layers)
    buf += struct.pack(f"<{n_layers + 1}I", *model.layer_sizes)
    for w, b in zip(model.weights, model.biases):
        buf += np.ascontiguousarray(w, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b, dtype="<f8").tobytes()
    atomic_write_bytes(path, bytes(buf))


def load_checkpoint(path) -> MlpParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", offset=0)
    if len(raw) < 12:
        raise FormatError("truncated header", offset=len(raw))
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    off = 12
    need = 4 * (n_layers + 1)
    if len(raw) < off + need:
        raise FormatError("truncated layer-size table", offset=len(raw))
    sizes = struct.unpack_from(f"<{n_layers + 1}I", raw, off)
    off += need
    weights, biases = [], []
    for i in range(n_layers):
        d_in, d_out = sizes[i], sizes[i + 1]
        wbytes = 8 * d_out * d_in
        if len(raw) < off + wbytes + 8 * d_out:
            raise FormatError(f"truncated parameters for layer {i}", offset=len(raw))
        w = np.frombuffer(raw, dtype="<f8", count=d_out * d_in, offset=off)
        off += wbytes
        b = np.frombuffer(raw, dtype="<f8", count=d_out, offset=off)
        off += 8 * d_out
        weights.append(w.reshape(d_out, d_in).copy())
        biases.append(b.copy())
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes", offset=off)
    return MlpParams(tuple(sizes), tuple(weights), tuple(biases))


def atomic_write_bytes(path, data: bytes):
    """Write via temp file + rename so partial artifacts are never visible."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-adlab-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
