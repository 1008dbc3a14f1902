"""Frozen feature encoder and class-embedding table standing in for a CLIP backbone."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import LookupFailure, ShapeError

TapFn = Callable[[int, ad.Tensor], ad.Tensor]


@dataclass
class FrozenEncoder:
    """Seeded tanh perceptron with one adapter tap after every layer.

    Layer 0 maps ``input_dim -> feature_dim``; the remaining ``taps - 1``
    layers are square. The output of the last tap is the image feature.
    """

    seed: int
    input_dim: int = 16
    feature_dim: int = 32
    taps: int = 2
    weight_scale: float = 1.0
    weights: list[np.ndarray] = field(init=False, repr=False)
    biases: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if self.input_dim < 1 or self.feature_dim < 1 or self.taps < 1:
            raise ShapeError("encoder dimensions must be positive")
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xE11C0DE]))
        self.weights, self.biases = [], []
        fan_in = self.input_dim
        for _ in range(self.taps):
            w = rng.standard_normal((fan_in, self.feature_dim)) * (self.weight_scale / np.sqrt(fan_in))
            b = rng.standard_normal(self.feature_dim) * 0.1
            w.setflags(write=False)
            b.setflags(write=False)
            self.weights.append(w)
            self.biases.append(b)
            fan_in = self.feature_dim

    @property
    def D(self) -> int:
        return self.feature_dim

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"expected inputs with {self.input_dim} entries, got shape {x.shape}")
        return x

    def encode(self, x) -> tuple[np.ndarray, list[np.ndarray]]:
        """Frozen forward pass. Returns ``(feature, [tap inputs])``.

        Works on one vector or a ``(B, input_dim)`` batch. Each tap input is the
        hidden activation where an adapter would be inserted.
        """
        h = self._check(x)
        taps = []
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w + b)
            taps.append(h)
        return h, taps

    def features(self, x) -> np.ndarray:
        return self.encode(x)[0]

    def forward(self, x, tap: TapFn | None = None) -> ad.Tensor:
        """Differentiable forward pass, calling ``tap(layer, hidden)`` at every insertion point."""
        x = self._check(x)
        if x.ndim == 1:
            x = x[None, :]
        h = ad.tensor(x)
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.tanh(ad.add(ad.matmul(h, w), b))
            if tap is not None:
                h = tap(layer, h)
        return h

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for arr in (*self.weights, *self.biases):
            digest.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return digest.hexdigest()


def unit_rows(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


class ClassEmbeddingTable:
    """Per-task frozen class embeddings with globally disjoint label sets."""

    def __init__(self):
        self._labels: dict[int, np.ndarray] = {}
        self._emb: dict[int, np.ndarray] = {}

    def add_task(self, task: int, labels, embeddings) -> None:
        labels = np.asarray(labels, dtype=np.int64)
        emb = unit_rows(embeddings)
        if emb.shape[0] != labels.size:
            raise ShapeError("one embedding per label required")
        if len(np.unique(labels)) != labels.size:
            raise ValueError(f"duplicate labels in task {task}")
        for other, other_labels in self._labels.items():
            if other != task and np.intersect1d(labels, other_labels).size:
                raise ValueError(f"task {task} labels overlap task {other}")
        emb.setflags(write=False)
        self._labels[task] = labels
        self._emb[task] = emb

    def tasks(self) -> list[int]:
        return sorted(self._labels)

    def labels(self, task: int) -> np.ndarray:
        try:
            return self._labels[task]
        except KeyError:
            raise LookupFailure(f"unknown task {task}") from None

    def embeddings(self, task: int) -> np.ndarray:
        try:
            return self._emb[task]
        except KeyError:
            raise LookupFailure(f"unknown task {task}") from None

    def __contains__(self, task: int) -> bool:
        return task in self._labels


@dataclass(frozen=True)
class LogitHead:
    temperature: float = 10.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    def logits(self, feature: ad.Tensor, embeddings: np.ndarray) -> ad.Tensor:
        """Scaled cosine similarity of each feature row against unit-norm embeddings."""
        norm = ad.sqrt(ad.sum(ad.mul(feature, feature), axis=1, keepdims=True))
        unit = ad.div(feature, norm)
        return ad.mul(ad.matmul(unit, embeddings.T), self.temperature)


def zero_shot_logits(feature, table: ClassEmbeddingTable, task: int, temperature: float = 10.0) -> np.ndarray:
    """``temperature * cos(feature, e_c)`` over the classes of ``task``."""
    emb = table.embeddings(task)
    f = np.asarray(feature, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    out = temperature * (f / np.where(norms > 0, norms, 1.0)) @ emb.T
    return out[0] if single else out
