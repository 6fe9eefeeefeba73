"""Client-side optimization: built-in models and mini-batch SGD.

Two differentiable models are provided, both ending in a softmax
cross-entropy loss averaged over the batch:

* ``logistic``: ``logits = X @ W + b``
* ``mlp``: one ReLU hidden layer, ``logits = relu(X @ W1 + b1) @ W2 + b2``

Parameters live in a single flat float64 vector; the layout's shape list tells
the two models apart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .aggregate import ClientUpdate
from .data import Dataset
from .errors import BadParam, EmptyClient, ShapeError, UnknownClient
from .packaging import DType, LayoutDescriptor, ModelParameters, pack, unpack
from .rng import seed_from

LOGISTIC = "logistic"
MLP = "mlp"


@dataclass(frozen=True)
class Model:
    kind: str
    d: int
    c: int
    h: int = 0

    def __post_init__(self):
        if self.kind not in (LOGISTIC, MLP):
            raise BadParam(f"unknown model kind {self.kind!r}")
        if self.d < 1 or self.c < 2 or (self.kind == MLP and self.h < 1):
            raise BadParam(f"bad model dimensions d={self.d} h={self.h} c={self.c}")

    @property
    def layout(self) -> LayoutDescriptor:
        if self.kind == LOGISTIC:
            shapes = ((self.d, self.c), (self.c,))
        else:
            shapes = ((self.d, self.h), (self.h,), (self.h, self.c), (self.c,))
        return LayoutDescriptor(shapes, DType.F64)

    @property
    def num_params(self) -> int:
        return self.layout.total

    @classmethod
    def from_layout(cls, layout: LayoutDescriptor) -> "Model":
        s = layout.shapes
        if len(s) == 2:
            return cls(LOGISTIC, s[0][0], s[0][1])
        if len(s) == 4:
            return cls(MLP, s[0][0], s[2][1], s[0][1])
        raise ShapeError(f"layout {s} matches no built-in model")

    def init_params(self, seed: int) -> ModelParameters:
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
        rng = seed_from(seed, [0x1417])
        tensors = []
        fan_in = self.d
        for shape in self.layout.shapes:
            bound = 1.0 / math.sqrt(fan_in)
            size = int(np.prod(shape))
            tensors.append(rng.uniform_array(size, -bound, bound).reshape(shape))
            if len(shape) == 1:  # bias closes a layer; the next one reads from it
                fan_in = shape[0]
        flat, layout = pack(tensors)
        return ModelParameters(flat, layout)


def _softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -float(np.mean(logp[np.arange(y.size), y]))
    return loss, np.exp(logp)


def _check_batch(model: Model, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != model.d:
        raise ShapeError(f"features of shape {X.shape} for a model with d={model.d}")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"{y.shape} labels for {X.shape[0]} rows")
    if X.shape[0] == 0:
        raise ShapeError("empty batch")
    if y.min() < 0 or y.max() >= model.c:
        raise ShapeError(f"labels outside [0, {model.c})")
    return X, y


def forward_loss(params: ModelParameters, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and the softmax probabilities for a batch."""
    model = Model.from_layout(params.layout)
    X, y = _check_batch(model, X, y)
    tensors = unpack(params.values, params.layout)
    if model.kind == LOGISTIC:
        W, b = tensors
        logits = X @ W + b
    else:
        W1, b1, W2, b2 = tensors
        logits = np.maximum(X @ W1 + b1, 0.0) @ W2 + b2
    return _softmax_xent(logits, y)


def backward(params: ModelParameters, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Analytic gradient of the mean loss, in the flat parameter layout."""
    model = Model.from_layout(params.layout)
    X, y = _check_batch(model, X, y)
    tensors = unpack(params.values, params.layout)
    B = X.shape[0]
    if model.kind == LOGISTIC:
        W, b = tensors
        _, P = _softmax_xent(X @ W + b, y)
        P[np.arange(B), y] -= 1.0
        G = P / B
        grads = [X.T @ G, G.sum(axis=0)]
    else:
        W1, b1, W2, b2 = tensors
        Z1 = X @ W1 + b1
        A = np.maximum(Z1, 0.0)
        _, P = _softmax_xent(A @ W2 + b2, y)
        P[np.arange(B), y] -= 1.0
        G = P / B
        dZ1 = (G @ W2.T) * (Z1 > 0.0)
        grads = [X.T @ dZ1, dZ1.sum(axis=0), A.T @ G, G.sum(axis=0)]
    return np.concatenate([g.reshape(-1) for g in grads])


def evaluate(params: ModelParameters, dataset: Dataset) -> tuple[float, float]:
    """Loss and accuracy over a whole dataset."""
    loss, probs = forward_loss(params, dataset.X, dataset.y)
    acc = float(np.mean(np.argmax(probs, axis=1) == dataset.y))
    return loss, acc


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise BadParam(f"epochs and batch_size must be positive: {self}")
        if self.lr < 0 or not 0.0 <= self.momentum < 1.0:
            raise BadParam(f"bad lr/momentum: {self}")


def local_train(params: ModelParameters, dataset: Dataset, indices: Sequence[int],
                cfg: TrainConfig, *, client_id: int = 0, round: int = 0) -> ClientUpdate:
    """Run ``cfg.epochs`` passes of mini-batch SGD over one client's samples.

    Batch order is reshuffled every epoch from a stream keyed by the client
    seed and the round, so the result is bit-for-bit reproducible.
    """
    idx = [int(i) for i in indices]
    if not idx:
        raise EmptyClient(f"client {client_id} has no samples")
    if min(idx) < 0 or max(idx) >= dataset.n:
        raise EmptyClient(f"client {client_id} indexes outside a dataset of {dataset.n}")
    rng = seed_from(cfg.seed, [round])
    w = np.array(params.values, dtype=np.float64)
    velocity = np.zeros_like(w)
    for _ in range(cfg.epochs):
        order = list(idx)
        rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            g = backward(ModelParameters(w, params.layout), dataset.X[batch], dataset.y[batch])
            if cfg.momentum:
                velocity = cfg.momentum * velocity + g
                g = velocity
            w = w - cfg.lr * g
    return ClientUpdate(client_id, ModelParameters(w, params.layout), len(idx), round)


def serial_train(params: ModelParameters, dataset: Dataset, partition: Mapping[int, Sequence[int]],
                 selected: Sequence[int], cfg: TrainConfig, *, round: int = 0) -> list[ClientUpdate]:
    """Train the selected clients one after another from the same starting point."""
    assignments = getattr(partition, "assignments", partition)
    unknown = [c for c in selected if c not in assignments]
    if unknown:
        raise UnknownClient(f"clients {unknown} are not in the partition")
    return [
        local_train(params, dataset, assignments[cid], cfg, client_id=cid, round=round)
        for cid in sorted(selected)
    ]
