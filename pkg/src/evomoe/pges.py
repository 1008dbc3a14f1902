"""Task identification from frozen features via per-task Gaussian prototypes.

Each task's features are clustered with k-means; every cluster becomes a
Gaussian component (mean, regularised unbiased covariance). A sample's score
for a task is the best component log-likelihood up to constants:

    S_t(x) = max_k  -0.5 * d2_k(x) - 0.5 * log|Sigma_k|

and the task with the highest score wins unless that score is below ``delta``,
in which case the sample goes to the frozen backbone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

log = logging.getLogger(__name__)

FALLBACK = -1


def kmeans(features, k: int, seed: int = 0, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with seeded farthest-point initialisation.

    Returns ``(assignments, centers)``. ``k`` is reduced to the number of
    points when there are fewer points than clusters.
    """
    X = np.asarray(features, dtype=np.float64)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if n == 0:
        raise ValueError("kmeans needs at least one point")
    if n < k:
        log.warning("kmeans: only %d points for k=%d, reducing k", n, k)
        k = n
    rng = np.random.default_rng(seed)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        centers.append(X[int(np.argmax(d2))])
        d2 = np.minimum(d2, ((X - centers[-1]) ** 2).sum(axis=1))
    C = np.array(centers)

    assign = None
    for _ in range(max_iter):
        dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        for j in range(k):
            if not np.any(new == j):
                # refill an empty cluster with the point farthest from its own center
                far = int(np.argmax(dist[np.arange(n), new]))
                new[far] = j
                dist[far, :] = np.inf
                dist[far, j] = 0.0
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        C = np.array([X[assign == j].mean(axis=0) for j in range(k)])
    return assign, C


def default_reg(cov: np.ndarray, scale: float = 1e-3, floor: float = 1e-6) -> float:
    return max(scale * float(np.trace(cov)) / cov.shape[0], floor)


@dataclass
class GaussianComponent:
    mean: np.ndarray
    cov: np.ndarray  # regularised
    chol: np.ndarray  # lower Cholesky factor of cov
    logdet: float
    count: int
    reg: float

    @classmethod
    def fit(cls, points: np.ndarray, reg: float | None = None, retries: int = 3) -> "GaussianComponent":
        points = np.asarray(points, dtype=np.float64)
        n, d = points.shape
        if n < 2:
            raise ValueError("a Gaussian component needs at least two points")
        mu = points.mean(axis=0)
        centered = points - mu
        raw = centered.T @ centered / (n - 1)
        raw = 0.5 * (raw + raw.T)
        lam = default_reg(raw) if reg is None else reg
        for _ in range(retries + 1):
            cov = raw + lam * np.eye(d)
            try:
                L = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            return cls(mu, cov, L, 2.0 * float(np.log(np.diag(L)).sum()), n, lam)
        raise np.linalg.LinAlgError(f"covariance not positive definite even with regularisation {lam / 10:g}")

    @property
    def inverse(self) -> np.ndarray:
        Linv = solve_triangular(self.chol, np.eye(self.chol.shape[0]), lower=True)
        return Linv.T @ Linv

    def mahalanobis_sq(self, x) -> np.ndarray:
        diff = np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.mean
        z = solve_triangular(self.chol, diff.T, lower=True)
        return (z * z).sum(axis=0)

    def log_score(self, x) -> np.ndarray:
        return -0.5 * self.mahalanobis_sq(x) - 0.5 * self.logdet


@dataclass
class TaskPrototypeSet:
    task: int
    components: list[GaussianComponent] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.components)


def build_prototypes(features, assignments, task: int = 0, reg: float | None = None) -> TaskPrototypeSet:
    """One Gaussian per cluster; clusters with fewer than two members are merged into the nearest one."""
    X = np.asarray(features, dtype=np.float64)
    assign = np.asarray(assignments).copy()
    labels = sorted(set(assign.tolist()))
    while True:
        sizes = {c: int((assign == c).sum()) for c in labels}
        small = [c for c in labels if sizes[c] < 2]
        if not small or len(labels) == 1:
            break
        c = small[0]
        mu = X[assign == c].mean(axis=0)
        others = [o for o in labels if o != c]
        nearest = min(others, key=lambda o: float(((X[assign == o].mean(axis=0) - mu) ** 2).sum()))
        assign[assign == c] = nearest
        labels = others
    if (assign == labels[0]).sum() < 2:
        raise ValueError("need at least two points to build a prototype")
    comps = [GaussianComponent.fit(X[assign == c], reg=reg) for c in labels]
    return TaskPrototypeSet(task=task, components=comps)


def task_score(x, protos: TaskPrototypeSet) -> np.ndarray | float:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    scores = np.max(np.stack([c.log_score(X) for c in protos.components]), axis=0)
    return float(scores[0]) if single else scores


@dataclass
class TaskDecision:
    task: np.ndarray  # predicted task per sample, FALLBACK when below threshold
    max_score: np.ndarray
    scores: np.ndarray  # (B, T) in the order of the prototype list
    tasks: list[int]

    @property
    def fallback(self) -> np.ndarray:
        return self.task == FALLBACK


def identify_task(x, prototypes: Sequence[TaskPrototypeSet], delta: float) -> TaskDecision:
    if not prototypes:
        raise ValueError("no task prototypes registered")
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tasks = [p.task for p in prototypes]
    scores = np.stack([task_score(X, p) for p in prototypes], axis=1)
    best = np.argmax(scores, axis=1)  # first maximum wins ties
    smax = scores[np.arange(len(X)), best]
    chosen = np.array(tasks)[best]
    chosen = np.where(smax < delta, FALLBACK, chosen)
    return TaskDecision(task=chosen, max_score=smax, scores=scores, tasks=tasks)


def calibrate_threshold(per_task_scores: Sequence[Sequence[float]], q: float = 0.5, min_scores: int = 20) -> float:
    """``min`` over tasks of the ``q``-th percentile (0-100 scale, linear interpolation) of own-task scores."""
    if not per_task_scores:
        raise ValueError("no scores to calibrate on")
    cuts = []
    for scores in per_task_scores:
        s = np.asarray(scores, dtype=np.float64)
        if s.size == 0:
            raise ValueError("empty score list")
        if s.size < min_scores:
            raise ValueError(f"need at least {min_scores} scores per task, got {s.size}")
        cuts.append(float(np.percentile(s, q, method="linear")))
    return min(cuts)
