"""Gradient-statistics-driven expert growth and pruning.

Per evolvable expert we accumulate, over a window of optimiser steps, the
sum of gradient norms, the sum of squared norms and the elementwise gradient
sum. From those:

* contribution  ``I = mean ||g||``
* instability   ``V = mean ||g||^2 - ||mean g||^2``   (clamped at 0)

and compare each against an exponential moving average of its own history.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConsistencyError, FrozenParameterError
from .moe import ExpertPool, LoraExpert, Router, resize_router

log = logging.getLogger(__name__)


@dataclass
class ExpertAccumulator:
    norm_sum: float = 0.0
    sq_norm_sum: float = 0.0
    grad_sum: np.ndarray | None = None
    routed: int = 0


@dataclass
class ExpertTelemetry:
    """Windowed per-expert accumulators for one adapter layer."""

    window: int = 50
    steps: int = 0
    samples: int = 0
    experts: dict[int, ExpertAccumulator] = field(default_factory=dict)

    def record_step(self, grads: dict[int, np.ndarray], routed: dict[int, int], batch_size: int) -> None:
        """Advance every tracked expert by one optimiser step.

        Experts absent from ``grads`` (not routed this step) contribute zeros.
        """
        if self.steps >= self.window:
            raise ConsistencyError(f"telemetry window of {self.window} steps overflowed; missing reset")
        for eid in set(grads) | set(routed):
            acc = self.experts.setdefault(eid, ExpertAccumulator())
            g = grads.get(eid)
            if g is None:
                acc.routed += int(routed.get(eid, 0))
                continue
            g = np.asarray(g, dtype=np.float64).ravel()
            if acc.grad_sum is None:
                acc.grad_sum = np.zeros_like(g)
            elif acc.grad_sum.shape != g.shape:
                raise ConsistencyError(f"gradient shape of expert {eid} changed mid-window")
            n2 = float(g @ g)
            acc.norm_sum += math.sqrt(n2)
            acc.sq_norm_sum += n2
            acc.grad_sum += g
            acc.routed += int(routed.get(eid, 0))
        self.steps += 1
        self.samples += batch_size

    def track(self, eid: int) -> None:
        self.experts.setdefault(eid, ExpertAccumulator())

    def forget(self, eid: int) -> None:
        self.experts.pop(eid, None)

    def reset(self) -> None:
        self.steps = 0
        self.samples = 0
        self.experts = {eid: ExpertAccumulator() for eid in self.experts}


@dataclass
class ExpertMetrics:
    contribution: float  # I_curr
    instability: float  # V_curr
    frequency: float  # f


def compute_metrics(tel: ExpertTelemetry) -> dict[int, ExpertMetrics]:
    if tel.steps < 1:
        raise ValueError("cannot compute metrics over an empty window")
    w = tel.steps
    out = {}
    for eid, acc in tel.experts.items():
        if acc.grad_sum is None:
            I = V = 0.0
        else:
            mean_g = acc.grad_sum / w
            I = acc.norm_sum / w
            V = max(acc.sq_norm_sum / w - float(mean_g @ mean_g), 0.0)
        f = acc.routed / tel.samples if tel.samples else 0.0
        out[eid] = ExpertMetrics(I, V, f)
    return out


@dataclass
class Baselines:
    """EMA references ``H_I`` and ``H_V`` per expert id."""

    alpha: float = 0.9
    H_I: dict[int, float] = field(default_factory=dict)
    H_V: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"EMA momentum must lie in (0, 1), got {self.alpha}")

    def has(self, eid: int) -> bool:
        return eid in self.H_I

    def initialise(self, eid: int, m: ExpertMetrics) -> None:
        self.H_I[eid] = m.contribution
        self.H_V[eid] = m.instability

    def forget(self, eid: int) -> None:
        self.H_I.pop(eid, None)
        self.H_V.pop(eid, None)


def ema(h: float, curr: float, alpha: float) -> float:
    return alpha * h + (1.0 - alpha) * curr


def update_baselines(b: Baselines, metrics: dict[int, ExpertMetrics]) -> Baselines:
    for eid, m in metrics.items():
        if not b.has(eid):
            b.initialise(eid, m)
            continue
        b.H_I[eid] = ema(b.H_I[eid], m.contribution, b.alpha)
        b.H_V[eid] = ema(b.H_V[eid], m.instability, b.alpha)
    return b


def guarded_ratio(curr: float, hist: float) -> float:
    # zero history: 0/0 counts as 0, anything else as +inf
    if hist > 0:
        return curr / hist
    return 0.0 if curr == 0 else math.inf


def prune_decision(f: float, I_curr: float, H_I: float, gamma_prune: float = 0.05) -> bool:
    return f < gamma_prune and guarded_ratio(I_curr, H_I) < 1.0 - gamma_prune


def expand_decision(f: float, V_curr: float, H_V: float, gamma_expand: float = 0.95) -> bool:
    if f == 0:
        return False
    return f * guarded_ratio(V_curr, H_V) > gamma_expand


def spawn_params(source: LoraExpert, sigma: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Noisy copy ``theta_new = theta_src + N(0, sigma^2)`` of an expert's weights."""
    down = source.down.data + sigma * rng.standard_normal(source.down.shape)
    up = source.up.data + sigma * rng.standard_normal(source.up.shape)
    return down, up


@dataclass
class EvolutionDecision:
    layer: int
    prune: list[int] = field(default_factory=list)  # expert ids
    expand: list[tuple[int, int]] = field(default_factory=list)  # (source expert id, rng seed)

    def empty(self) -> bool:
        return not self.prune and not self.expand


def decide(
    layer: int,
    metrics: dict[int, ExpertMetrics],
    baselines: Baselines,
    evolvable: list[int],
    gamma_prune: float,
    gamma_expand: float,
    rng: np.random.Generator,
    allow_prune: bool = True,
    allow_expand: bool = True,
    skip: set[int] = frozenset(),
) -> EvolutionDecision:
    dec = EvolutionDecision(layer)
    for eid in evolvable:
        if eid in skip or eid not in metrics or not baselines.has(eid):
            continue
        m = metrics[eid]
        if allow_prune and prune_decision(m.frequency, m.contribution, baselines.H_I[eid], gamma_prune):
            dec.prune.append(eid)
        elif allow_expand and expand_decision(m.frequency, m.instability, baselines.H_V[eid], gamma_expand):
            dec.expand.append((eid, int(rng.integers(2**63 - 1))))
    return dec


def apply_evolution(
    decision: EvolutionDecision,
    pool: ExpertPool,
    router: Router,
    store: ad.ParamStore,
    opt_state: ad.AdamWState,
    task: int,
    sigma: float = 0.01,
    max_evolvable: int = 8,
) -> dict[str, list[int]]:
    """Mutate pool, router(s) and optimiser state according to ``decision``.

    Returns ``{"pruned": [...], "spawned": [...]}`` with the ids actually touched.
    """
    layer = decision.layer
    frozen_ids = {e.id for e in pool.experts(layer) if e.frozen}
    touched = set(decision.prune) | {src for src, _ in decision.expand}
    if touched & frozen_ids:
        raise FrozenParameterError(f"evolution decision touches frozen experts {sorted(touched & frozen_ids)}")
    if set(decision.prune) & {src for src, _ in decision.expand}:
        raise ConsistencyError("an expert cannot be pruned and expanded in the same event")

    pruned: list[int] = []
    evolvable = [e.id for e in pool.evolvable(layer)]
    for eid in decision.prune:
        if len(evolvable) - len(pruned) <= 1:
            log.warning("layer %d: not pruning expert %d, it is the last evolvable expert", layer, eid)
            continue
        pruned.append(eid)

    spawned: list[int] = []
    live = len(evolvable) - len(pruned)
    for src_id, seed in decision.expand:
        if live >= max_evolvable:
            log.info("layer %d: evolvable expert cap %d reached, skipping expansion", layer, max_evolvable)
            break
        down, up = spawn_params(pool.get(layer, src_id), sigma, np.random.default_rng(seed))
        spawned.append(pool.new_expert(store, layer, task, down, up).id)
        live += 1

    if not pruned and not spawned:
        return {"pruned": [], "spawned": []}

    for eid in pruned:
        expert = pool.remove(store, layer, eid)
        for p in expert.params():
            opt_state.forget(p.name)
    drop = [i for i, eid in enumerate(router.expert_ids) if eid in set(pruned)]
    resize_router(router, add=spawned, remove=drop, opt_state=opt_state)
    if router.expert_ids != pool.ids(layer):
        raise ConsistencyError(f"layer {layer}: router ids {router.expert_ids} != pool ids {pool.ids(layer)}")
    return {"pruned": pruned, "spawned": spawned}
