"""Inference path with prototype-based task routing, accuracy matrices and stream metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import pges
from .backbone import zero_shot_logits
from .taskgen import TaskStream
from .trainer import ModelState, forward

PROTOCOLS = ("pges", "oracle", "zero_shot", "adapter")


@dataclass
class Prediction:
    labels: np.ndarray  # local class index within the label space used
    routed: np.ndarray  # task whose router was used, or pges.FALLBACK


def adapter_logits(state: ModelState, x: np.ndarray, router_task: int, label_task: int) -> np.ndarray:
    feat, _ = forward(state, x, router_task)
    return state.head.logits(feat, state.table.embeddings(label_task)).data


def infer(
    state: ModelState,
    x,
    delta: float | None = None,
    eval_task: int | None = None,
    protocol: str = "pges",
    batch_size: int = 256,
) -> Prediction:
    """Predict labels for a batch.

    ``protocol``:
      * ``pges``      identify the task from frozen features; below ``delta`` fall back to zero-shot
      * ``oracle``    use ``eval_task``'s router when that task has been trained, else zero-shot
      * ``zero_shot`` frozen backbone only
      * ``adapter``   always the (shared) adapter path, no fallback

    Classes are scored in ``eval_task``'s label space when given, otherwise in
    the label space of the routed task (zero-shot then needs ``eval_task``).
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    delta = state.delta if delta is None else delta
    feats = state.encoder.features(x)
    n = len(x)

    if protocol == "zero_shot" or not state.completed:
        routed = np.full(n, pges.FALLBACK)
    elif protocol == "pges":
        routed = pges.identify_task(feats, state.prototypes, delta).task
    elif protocol == "oracle":
        if eval_task is None:
            raise ValueError("oracle protocol needs eval_task")
        routed = np.full(n, eval_task if eval_task in state.completed else pges.FALLBACK)
    else:  # adapter
        routed = np.full(n, state.completed[-1] if eval_task is None else eval_task)

    labels = np.zeros(n, dtype=np.int64)
    fb = routed == pges.FALLBACK
    if fb.any():
        if eval_task is None:
            raise ValueError("zero-shot fallback needs eval_task to pick a label space")
        labels[fb] = zero_shot_logits(feats[fb], state.table, eval_task, state.head.temperature).argmax(axis=1)
    for t in np.unique(routed[~fb]):
        sel = np.flatnonzero(routed == t)
        label_task = int(t) if eval_task is None else eval_task
        for start in range(0, sel.size, batch_size):
            chunk = sel[start : start + batch_size]
            labels[chunk] = adapter_logits(state, x[chunk], int(t), label_task).argmax(axis=1)
    return Prediction(labels, routed)


@dataclass
class AccuracyMatrix:
    """``acc[k, j]``: accuracy on task k after stage j (0-based)."""

    acc: np.ndarray
    protocol: str
    task_names: list[str]

    @property
    def K(self) -> int:
        return self.acc.shape[0]


@dataclass
class RoutingMatrix:
    """``frac[j, k, d]``: share of task k's test samples routed to destination d after stage j.

    Destinations are the T tasks followed by the fallback column.
    """

    frac: np.ndarray
    task_names: list[str]

    def table8(self) -> np.ndarray:
        """Rows stage, columns task: own-task routing rate for seen tasks, leakage to learned routers for unseen."""
        T = self.frac.shape[1]
        out = np.zeros((self.frac.shape[0], T))
        for j in range(self.frac.shape[0]):
            for k in range(T):
                out[j, k] = self.frac[j, k, k] if k <= j else self.frac[j, k, :T].sum()
        return out


def evaluate_stage(state: ModelState, stream: TaskStream, protocol: str = "pges") -> tuple[np.ndarray, np.ndarray]:
    """One column of the accuracy matrix and the matching routing fractions ``(T, T+1)``."""
    T = len(stream)
    acc = np.zeros(T)
    frac = np.zeros((T, T + 1))
    for k, spec in enumerate(stream.tasks):
        pred = infer(state, spec.test.x, eval_task=spec.task, protocol=protocol)
        acc[k] = float(np.mean(pred.labels == spec.test.y))
        dest = np.where(pred.routed == pges.FALLBACK, T, pred.routed)
        frac[k] = np.bincount(dest, minlength=T + 1) / len(dest)
    return acc, frac


def evaluate_stream(snapshots: Sequence[ModelState], stream: TaskStream, protocol: str = "pges") -> tuple[AccuracyMatrix, RoutingMatrix]:
    T = len(stream)
    if len(snapshots) != T:
        raise ValueError(f"expected {T} stage checkpoints, got {len(snapshots)}")
    acc = np.zeros((T, T))
    frac = np.zeros((T, T, T + 1))
    for j, state in enumerate(snapshots):
        if state is None:
            raise ValueError(f"missing checkpoint for stage {j}")
        acc[:, j], frac[j] = evaluate_stage(state, stream, protocol)
    names = [s.name for s in stream.tasks]
    return AccuracyMatrix(acc, protocol, names), RoutingMatrix(frac, names)


# ----------------------------------------------------------------- metrics


def transfer_metric(A) -> tuple[list[float], float | None]:
    """Per task k>=2: mean accuracy on task k over the stages before it was trained."""
    a = np.asarray(getattr(A, "acc", A), dtype=np.float64)
    K = a.shape[0]
    per = [float(a[k, :k].mean()) for k in range(1, K)]
    return per, (float(np.mean(per)) if per else None)


def avg_metric(A) -> tuple[list[float], float]:
    a = np.asarray(getattr(A, "acc", A), dtype=np.float64)
    per = [float(a[k, :].mean()) for k in range(a.shape[0])]
    return per, float(np.mean(per))


def last_metric(A) -> tuple[list[float], float]:
    a = np.asarray(getattr(A, "acc", A), dtype=np.float64)
    per = [float(v) for v in a[:, -1]]
    return per, float(np.mean(per))


def summarize(A) -> dict:
    tr, tr_all = transfer_metric(A)
    av, av_all = avg_metric(A)
    la, la_all = last_metric(A)
    return {
        "transfer": {"per_task": tr, "overall": tr_all},
        "avg": {"per_task": av, "overall": av_all},
        "last": {"per_task": la, "overall": la_all},
    }
