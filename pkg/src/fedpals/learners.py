"""Local client models: multinomial logistic regression and a one-hidden-layer tanh MLP.

Parameters travel as a flat :class:`ParamVector`; layouts are
``[W (d x K), b (K)]`` for logistic and ``[W1 (d x h), b1 (h), W2 (h x K), b2 (K)]``
for the MLP.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from fedpals.distshift import Dataset

Shape = tuple[int, ...]


@dataclass(frozen=True)
class ModelArch:
    kind: Literal["logistic", "mlp"]
    d: int
    K: int
    hidden: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown architecture {self.kind!r}")
        if self.d < 1 or self.K < 2:
            raise ValueError("need d >= 1 and K >= 2")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp requires hidden width >= 1")

    @property
    def layout(self) -> tuple[Shape, ...]:
        if self.kind == "logistic":
            return ((self.d, self.K), (self.K,))
        return ((self.d, self.hidden), (self.hidden,), (self.hidden, self.K), (self.K,))

    @property
    def size(self) -> int:
        return sum(math.prod(s) for s in self.layout)


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: tuple[Shape, ...]

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        layout = tuple(tuple(int(x) for x in s) for s in self.layout)
        expected = sum(math.prod(s) for s in layout)
        if v.size != expected:
            raise ValueError(f"parameter length {v.size} does not match layout size {expected}")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameters contain non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "layout", layout)

    def __len__(self) -> int:
        return int(self.values.size)

    def unpack(self) -> list[np.ndarray]:
        out, off = [], 0
        for s in self.layout:
            k = math.prod(s)
            out.append(self.values[off : off + k].reshape(s))
            off += k
        return out

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)


@dataclass(frozen=True)
class LocalUpdateConfig:
    epochs: int = 1
    batch_size: int = 1 << 30
    learning_rate: float = 0.1
    prox_mu: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.prox_mu >= 0:
            raise ValueError("prox_mu must be >= 0")


def init_params(arch: ModelArch, seed: int) -> ParamVector:
    """Zeros for logistic; Glorot-uniform weights and zero biases for the MLP."""
    if arch.kind == "logistic":
        return ParamVector(np.zeros(arch.size), arch.layout)
    rng = np.random.default_rng(seed)
    parts = []
    for shape in arch.layout:
        if len(shape) == 2:
            a = math.sqrt(6.0 / (shape[0] + shape[1]))
            parts.append(rng.uniform(-a, a, size=shape).ravel())
        else:
            parts.append(np.zeros(shape))
    return ParamVector(np.concatenate(parts), arch.layout)


def _logits(arch: ModelArch, layers: list[np.ndarray], X: np.ndarray):
    if arch.kind == "logistic":
        W, b = layers
        return X @ W + b, None
    W1, b1, W2, b2 = layers
    H = np.tanh(X @ W1 + b1)
    return H @ W2 + b2, H


def predict_logits(arch: ModelArch, params: ParamVector, X: np.ndarray) -> np.ndarray:
    return _logits(arch, params.unpack(), np.asarray(X, dtype=np.float64))[0]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _unpack(arch: ModelArch, v: np.ndarray) -> list[np.ndarray]:
    out, off = [], 0
    for s in arch.layout:
        k = math.prod(s)
        out.append(v[off : off + k].reshape(s))
        off += k
    return out


def _loss_grad(arch: ModelArch, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    n = y.size
    layers = _unpack(arch, theta)
    z, H = _logits(arch, layers, X)
    logp = _log_softmax(z)
    rows = np.arange(n)
    loss = -float(logp[rows, y].mean())
    if not math.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss {loss} (max |logit| = {np.abs(z).max():.3g}, "
            f"max |param| = {np.abs(theta).max():.3g})"
        )
    G = np.exp(logp)
    G[rows, y] -= 1.0
    G /= n
    if arch.kind == "logistic":
        grads = [X.T @ G, G.sum(axis=0)]
    else:
        dH = (G @ layers[2].T) * (1.0 - H * H)
        grads = [X.T @ dH, dH.sum(axis=0), H.T @ G, G.sum(axis=0)]
    return loss, np.concatenate([a.ravel() for a in grads])


def loss_and_grad(
    arch: ModelArch,
    params: ParamVector,
    batch: Dataset,
    prox_mu: float = 0.0,
    anchor: ParamVector | None = None,
) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy plus ``prox_mu/2 * ||params - anchor||^2`` and its gradient."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if prox_mu > 0 and anchor is None:
        raise ValueError("anchor is required when prox_mu > 0")
    if len(params) != arch.size:
        raise ValueError(f"params have length {len(params)}, architecture needs {arch.size}")
    loss, g = _loss_grad(arch, params.values, batch.features, batch.labels)
    if prox_mu > 0:
        diff = params.values - anchor.values
        loss += 0.5 * prox_mu * float(diff @ diff)
        g = g + prox_mu * diff
    return loss, params.replace(g)


def local_update(
    arch: ModelArch,
    params: ParamVector,
    dataset: Dataset,
    cfg: LocalUpdateConfig,
    seed: int | np.random.Generator,
) -> ParamVector:
    """``cfg.epochs`` epochs of mini-batch SGD from ``params``.

    Each epoch shuffles with the seeded stream and keeps the last short batch.
    Rows inside a batch are processed in dataset order, so a full-batch epoch is
    exactly ``params - lr * grad``. The proximal anchor is the incoming ``params``.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    if len(params) != arch.size:
        raise ValueError(f"params have length {len(params)}, architecture needs {arch.size}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    X, y = dataset.features, dataset.labels
    anchor = params.values
    theta = params.values.copy()
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(perm[start : start + cfg.batch_size])
            if idx.size == n:
                _, g = _loss_grad(arch, theta, X, y)
            else:
                _, g = _loss_grad(arch, theta, X[idx], y[idx])
            if cfg.prox_mu > 0:
                g = g + cfg.prox_mu * (theta - anchor)
            theta = theta - cfg.learning_rate * g
    return params.replace(theta)


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    mean_loss: float
    macro_f1: float


def macro_f1(y_true: np.ndarray, y_pred: np.ndarray, K: int) -> float:
    """Unweighted mean of per-class F1 over all ``K`` classes; a class with no support and no predictions scores 0."""
    f1 = np.zeros(K)
    for k in range(K):
        tp = np.sum((y_pred == k) & (y_true == k))
        fp = np.sum((y_pred == k) & (y_true != k))
        fn = np.sum((y_pred != k) & (y_true == k))
        denom = 2 * tp + fp + fn
        f1[k] = 2 * tp / denom if denom else 0.0
    return float(f1.mean())


def evaluate(arch: ModelArch, params: ParamVector, dataset: Dataset) -> Evaluation:
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    z = predict_logits(arch, params, dataset.features)
    logp = _log_softmax(z)
    pred = np.argmax(z, axis=1)
    return Evaluation(
        accuracy=float(np.mean(pred == dataset.labels)),
        mean_loss=-float(logp[np.arange(n), dataset.labels].mean()),
        macro_f1=macro_f1(dataset.labels, pred, dataset.K),
    )


# -- binary format --------------------------------------------------------------
# magic "FPPV", u32 version, u64 round index, u32 layer count,
# per layer: u32 ndim + u32 dims, u64 value count, float64 LE values.

_MAGIC = b"FPPV"
_VERSION = 1


def params_to_bytes(params: ParamVector, round_index: int = 0) -> bytes:
    out = [_MAGIC, struct.pack("<IQI", _VERSION, round_index, len(params.layout))]
    for s in params.layout:
        out.append(struct.pack(f"<I{len(s)}I", len(s), *s))
    out.append(struct.pack("<Q", len(params)))
    out.append(params.values.astype("<f8").tobytes())
    return b"".join(out)


def params_from_bytes(buf: bytes) -> tuple[ParamVector, int]:
    if buf[:4] != _MAGIC:
        raise ValueError("not a parameter file (bad magic)")
    off = 4
    version, round_index, nlayers = struct.unpack_from("<IQI", buf, off)
    if version != _VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    off += struct.calcsize("<IQI")
    layout = []
    for _ in range(nlayers):
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        layout.append(struct.unpack_from(f"<{ndim}I", buf, off))
        off += 4 * ndim
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if len(buf) - off != 8 * count:
        raise ValueError(f"truncated parameter file: expected {count} values")
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(np.float64)
    return ParamVector(values, tuple(layout)), round_index


def save_params(path: str | Path, params: ParamVector, round_index: int = 0) -> None:
    Path(path).write_bytes(params_to_bytes(params, round_index))


def load_params(path: str | Path) -> tuple[ParamVector, int]:
    return params_from_bytes(Path(path).read_bytes())
