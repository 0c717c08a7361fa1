"""Parameterized layers shared by every model variant."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def splitmix64(x, seed: int = 0) -> np.ndarray:
    """SplitMix64 finalizer applied to ``x + seed`` (vectorized, wraps mod 2**64)."""
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


@dataclass
class EmbeddingTable:
    """Hashed embedding: an id maps to row ``splitmix64(id, seed) mod size``."""

    table_size: int
    dim: int = 8
    hash_seed: int = 0
    weights: Optional[Tensor] = None

    def __post_init__(self):
        if self.table_size <= 0 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")

    def init(self, rng: np.random.Generator, scale: float = 0.05, dtype=np.float64) -> "EmbeddingTable":
        w = rng.normal(0.0, scale, size=(self.table_size, self.dim)).astype(dtype)
        self.weights = Tensor(w, requires_grad=True)
        return self

    def rows(self, ids) -> np.ndarray:
        if isinstance(ids, np.ndarray) and ids.dtype.kind in "iu":
            ids = ids.astype(np.uint64)
        else:
            ids = np.array([int(i) & 0xFFFFFFFFFFFFFFFF for i in np.ravel(ids)], dtype=np.uint64).reshape(np.shape(ids))
        return (splitmix64(ids, self.hash_seed) & np.uint64(self.table_size - 1)).astype(np.int64)

    def __call__(self, ids) -> Tensor:
        return T.take(self.weights, self.rows(ids))


def embed(table: EmbeddingTable, feature_id: int) -> Tensor:
    return T.reshape(table([feature_id]), (table.dim,))


@dataclass
class MlpParams:
    """Stack of affine layers; ``activations[i]`` is one of relu / none / sigmoid."""

    layer_dims: Sequence[int]
    activations: Sequence[str]
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.activations) != len(self.layer_dims) - 1:
            raise ValueError("need one activation per layer")

    def init(self, rng: np.random.Generator, dtype=np.float64, zero=False) -> "MlpParams":
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            if zero:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))
            self.weights.append(Tensor(w.astype(dtype), requires_grad=True))
            self.biases.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))
        return self

    def tensors(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def mlp_forward(p: MlpParams, x: Tensor) -> Tensor:
    if x.shape[-1] != p.layer_dims[0]:
        raise T.ShapeError(f"MLP expects input dim {p.layer_dims[0]}, got {x.shape[-1]}")
    h = x
    for w, b, act in zip(p.weights, p.biases, p.activations):
        h = T.add(T.matmul(h, w), b)
        if act == "relu":
            h = T.relu(h)
        elif act == "sigmoid":
            h = T.sigmoid(h)
    return h


def attention(query: Tensor, keys: Tensor, values: Tensor, mask=None,
              allow_empty: bool = False) -> Tensor:
    """Single-head scaled dot-product attention.

    Shapes: query ``(..., d)``, keys ``(..., n, d)``, values ``(..., n, dv)``,
    mask ``(..., n)``. Returns ``(..., dv)``. With ``allow_empty`` a row whose
    mask is all false yields zeros instead of raising.
    """
    d = query.shape[-1]
    if keys.shape[-1] != d or keys.shape[-2] != values.shape[-2]:
        raise T.ShapeError(f"attention shapes disagree: q {query.shape}, k {keys.shape}, v {values.shape}")
    q = T.reshape(query, query.shape[:-1] + (d, 1))
    scores = T.reshape(T.matmul(keys, q), keys.shape[:-1])
    weights = T.softmax(T.mul(scores, 1.0 / math.sqrt(d)), mask, allow_empty=allow_empty)
    w = T.reshape(weights, weights.shape[:-1] + (1, weights.shape[-1]))
    out = T.matmul(w, values)
    return T.reshape(out, out.shape[:-2] + (values.shape[-1],))
