"""Freeze-and-evolve continual training loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import pges, scee
from .backbone import ClassEmbeddingTable, FrozenEncoder, LogitHead
from .errors import ConfigError, ConsistencyError, NonFiniteError
from .moe import ExpertPool, LayerOutput, Router, layer_balance_loss, moe_forward, new_router, params_digest, resize_router
from .taskgen import DomainSpec, TaskStream

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_iters: int = 500
    lr: float = 1e-3
    weight_decay: float = 0.0
    label_smoothing: float = 0.2
    p0: float = 0.6
    beta_new: float = 0.6
    lambda_lb: float = 0.01
    gamma_expand: float = 0.95
    gamma_prune: float = 0.05
    alpha: float = 0.9
    interval: int = 50
    window_fraction: float = 0.6
    sigma: float = 0.01
    K: int = 3
    percentile: float = 0.5
    seed: int = 0
    rank: int = 4
    experts_per_task: int = 2
    max_evolvable: int = 8
    init_std: float = 0.02
    temperature: float = 10.0
    prototype_cap: int = 2000
    # ablation switches
    enable_expand: bool = True
    enable_prune: bool = True
    enable_lb: bool = True
    routing: str = "top_p"  # or "top2"
    router_mode: str = "task"  # or "shared"
    use_pges: bool = True
    freeze_history: bool = True
    new_experts_every_task: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.max_iters >= 1, "max_iters must be >= 1"),
            (self.lr > 0, "lr must be positive"),
            (0.0 <= self.label_smoothing < 1.0, "label_smoothing must be in [0, 1)"),
            (0.0 < self.p0 <= 1.0, "p0 must be in (0, 1]"),
            (0.0 < self.beta_new <= 1.0, "beta_new must be in (0, 1]"),
            (self.lambda_lb >= 0, "lambda_lb must be >= 0"),
            (self.gamma_expand > 0, "gamma_expand must be positive"),
            (0.0 < self.gamma_prune < 1.0, "gamma_prune must be in (0, 1)"),
            (0.0 < self.alpha < 1.0, "alpha must be in (0, 1)"),
            (self.interval >= 1, "interval must be >= 1"),
            (0.0 <= self.window_fraction <= 1.0, "window_fraction must be in [0, 1]"),
            (self.sigma >= 0, "sigma must be >= 0"),
            (self.K >= 1, "K must be >= 1"),
            (0.0 <= self.percentile <= 100.0, "percentile must be in [0, 100]"),
            (self.rank >= 1, "rank must be >= 1"),
            (self.experts_per_task >= 1, "experts_per_task must be >= 1"),
            (self.max_evolvable >= 1, "max_evolvable must be >= 1"),
            (self.routing in ("top_p", "top2"), "routing must be 'top_p' or 'top2'"),
            (self.router_mode in ("task", "shared"), "router_mode must be 'task' or 'shared'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


SEQUENTIAL_ADAPTER = dict(
    router_mode="shared",
    use_pges=False,
    freeze_history=False,
    new_experts_every_task=False,
    experts_per_task=1,
    enable_expand=False,
    enable_prune=False,
)


@dataclass
class ModelState:
    encoder: FrozenEncoder
    table: ClassEmbeddingTable
    head: LogitHead
    pool: ExpertPool
    store: ad.ParamStore
    opt: ad.AdamWState
    config: TrainConfig
    routers: dict[tuple[int, int], Router] = field(default_factory=dict)
    prototypes: list[pges.TaskPrototypeSet] = field(default_factory=list)
    calib_scores: dict[int, np.ndarray] = field(default_factory=dict)
    delta: float = -np.inf
    completed: list[int] = field(default_factory=list)
    current_task: int | None = None
    baselines: list[scee.Baselines] = field(default_factory=list)
    telemetry: list[scee.ExpertTelemetry] = field(default_factory=list)

    @property
    def layers(self) -> int:
        return len(self.pool)

    def router_key(self, task: int, layer: int) -> tuple[int, int]:
        if self.config.router_mode == "shared":
            return (-1, layer)
        return (task, layer)

    def router(self, task: int, layer: int) -> Router:
        return self.routers[self.router_key(task, layer)]

    def has_router(self, task: int) -> bool:
        return self.router_key(task, 0) in self.routers

    def task_params(self, task: int) -> list[ad.Parameter]:
        """Router and expert parameters owned by ``task``."""
        out = []
        for layer in range(self.layers):
            key = (task, layer)
            if key in self.routers:
                out.extend(self.routers[key].params())
            for e in self.pool.experts(layer):
                if e.origin_task == task:
                    out.extend(e.params())
        return out

    def task_digest(self, task: int) -> str:
        return params_digest(self.task_params(task))

    def expert_counts(self) -> list[int]:
        return self.pool.counts()

    def snapshot(self) -> "ModelState":
        """Deep copy for evaluation; the frozen encoder is shared."""
        clone = copy.copy(self)
        memo = {id(self.encoder): self.encoder}
        for name in ("table", "pool", "store", "opt", "config", "routers", "prototypes", "calib_scores", "completed"):
            setattr(clone, name, copy.deepcopy(getattr(self, name), memo))
        clone.baselines = []
        clone.telemetry = []
        return clone


def build_class_table(encoder: FrozenEncoder, stream: TaskStream) -> ClassEmbeddingTable:
    table = ClassEmbeddingTable()
    for spec in stream.tasks:
        table.add_task(spec.task, spec.labels, encoder.features(spec.prototypes))
    return table


def init_state(stream: TaskStream, config: TrainConfig, encoder_seed: int | None = None, taps: int = 2, feature_dim: int = 32) -> ModelState:
    encoder = FrozenEncoder(seed=config.seed if encoder_seed is None else encoder_seed, input_dim=stream.input_dim, feature_dim=feature_dim, taps=taps)
    return ModelState(
        encoder=encoder,
        table=build_class_table(encoder, stream),
        head=LogitHead(config.temperature),
        pool=ExpertPool(taps, feature_dim, config.rank),
        store=ad.ParamStore(),
        opt=ad.AdamWState(lr=config.lr, weight_decay=config.weight_decay),
        config=config,
        baselines=[scee.Baselines(config.alpha) for _ in range(taps)],
        telemetry=[scee.ExpertTelemetry(window=config.interval) for _ in range(taps)],
    )


def _rng(config: TrainConfig, task: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, task, purpose]))


# purposes for seeded sub-streams
_EXPERT_INIT, _BATCHES, _KMEANS, _SPAWN, _SUBSAMPLE = range(5)


def capture_prototypes(spec: DomainSpec, encoder: FrozenEncoder, config: TrainConfig) -> tuple[pges.TaskPrototypeSet, np.ndarray]:
    """Gaussian prototypes of the task's frozen training features, plus those features' own scores."""
    x = spec.train.x
    if len(x) == 0:
        raise ValueError(f"task {spec.task} has no training data")
    if len(x) > config.prototype_cap:
        idx = np.sort(_rng(config, spec.task, _SUBSAMPLE).choice(len(x), config.prototype_cap, replace=False))
        x = x[idx]
    feats = encoder.features(x)
    assign, _ = pges.kmeans(feats, config.K, seed=int(_rng(config, spec.task, _KMEANS).integers(2**32)))
    protos = pges.build_prototypes(feats, assign, task=spec.task)
    return protos, pges.task_score(feats, protos)


def begin_task(state: ModelState, task: int) -> ModelState:
    cfg = state.config
    if task in state.completed or task == state.current_task:
        raise ValueError(f"task {task} was already started")
    if state.completed and task < max(state.completed):
        raise ValueError(f"tasks must arrive in order; got {task} after {state.completed}")

    if cfg.freeze_history:
        for r in state.routers.values():
            if cfg.router_mode == "task":
                r.freeze()
        for e in state.pool.all_experts():
            e.freeze()

    add_experts = cfg.new_experts_every_task or not state.completed
    rng = _rng(cfg, task, _EXPERT_INIT)
    D, r = state.pool.dim, state.pool.rank
    for layer in range(state.layers):
        if add_experts:
            for _ in range(cfg.experts_per_task):
                state.pool.new_expert(state.store, layer, task, rng.normal(0.0, cfg.init_std, (D, r)), np.zeros((r, D)))
        key = state.router_key(task, layer)
        if key not in state.routers:
            state.routers[key] = new_router(state.store, key[0], layer, D, state.pool.ids(layer), name=_router_base(key))
        else:
            router = state.routers[key]
            missing = [i for i in state.pool.ids(layer) if i not in router.expert_ids]
            if missing:
                resize_router(router, add=missing, opt_state=state.opt)
        state.router(task, layer).check()

    state.current_task = task
    state.baselines = [scee.Baselines(cfg.alpha) for _ in range(state.layers)]
    state.telemetry = [scee.ExpertTelemetry(window=cfg.interval) for _ in range(state.layers)]
    for layer in range(state.layers):
        for e in state.pool.evolvable(layer):
            state.telemetry[layer].track(e.id)
    _audit_trainable(state, task)
    return state


def _router_base(key: tuple[int, int]) -> str:
    task, layer = key
    return f"Rshared.L{layer}" if task < 0 else f"R{task}.L{layer}"


def _audit_trainable(state: ModelState, task: int) -> None:
    expected = set()
    for layer in range(state.layers):
        expected.update(p.name for p in state.router(task, layer).params())
        for e in state.pool.evolvable(layer):
            expected.update(p.name for p in e.params())
    if not state.config.freeze_history:
        expected.update(p.name for r in state.routers.values() for p in r.params())
    actual = {p.name for p in state.store.trainable()}
    if actual != expected:
        raise ConsistencyError(f"trainable set mismatch: extra {sorted(actual - expected)}, missing {sorted(expected - actual)}")


def forward(state: ModelState, x: np.ndarray, task: int) -> tuple[ad.Tensor, list[LayerOutput]]:
    """Encoder with adapters routed by ``task``'s router at every tap."""
    cfg = state.config
    outs: list[LayerOutput] = []
    lookup = [{e.id: e for e in state.pool.experts(layer)} for layer in range(state.layers)]

    def tap(layer: int, h: ad.Tensor) -> ad.Tensor:
        router = state.router(task, layer)
        experts = [lookup[layer][i] for i in router.expert_ids]
        out = moe_forward(h, experts, router, cfg.p0, cfg.routing)
        outs.append(out)
        return out.y

    return state.encoder.forward(x, tap), outs


def betas_for(state: ModelState, out: LayerOutput, layer: int) -> np.ndarray:
    frozen = {e.id for e in state.pool.experts(layer) if e.frozen}
    return np.array([1.0 if eid in frozen else state.config.beta_new for eid in out.expert_ids])


def task_loss(state: ModelState, x: np.ndarray, y: np.ndarray, task: int) -> tuple[ad.Tensor, list[LayerOutput]]:
    cfg = state.config
    feat, outs = forward(state, x, task)
    logits = state.head.logits(feat, state.table.embeddings(task))
    loss = ad.label_smoothed_ce(logits, y, cfg.label_smoothing)
    if cfg.enable_lb and cfg.lambda_lb > 0:
        lb = None
        for layer, out in enumerate(outs):
            term = layer_balance_loss(out, betas_for(state, out, layer))
            lb = term if lb is None else ad.add(lb, term)
        loss = ad.add(loss, ad.mul(lb, cfg.lambda_lb))
    return loss, outs


@dataclass
class TaskLog:
    task: int
    losses: list[float] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    counts_after: list[int] = field(default_factory=list)

    @property
    def expansions(self) -> int:
        return sum(len(e["spawned"]) for e in self.events)

    @property
    def prunes(self) -> int:
        return sum(len(e["pruned"]) for e in self.events)


def evolution_event(state: ModelState, task: int, step: int, rng: np.random.Generator, in_window: bool, tlog: TaskLog) -> None:
    """metrics -> evolve (inside the window) -> baseline update -> reset."""
    cfg = state.config
    for layer in range(state.layers):
        tel, base = state.telemetry[layer], state.baselines[layer]
        metrics = scee.compute_metrics(tel)
        cold = {eid for eid in metrics if not base.has(eid)}
        applied = {"pruned": [], "spawned": []}
        if in_window and (cfg.enable_prune or cfg.enable_expand):
            evolvable = [e.id for e in state.pool.evolvable(layer)]
            dec = scee.decide(
                layer,
                metrics,
                base,
                evolvable,
                cfg.gamma_prune,
                cfg.gamma_expand,
                rng,
                allow_prune=cfg.enable_prune,
                allow_expand=cfg.enable_expand,
                skip=cold,
            )
            applied = scee.apply_evolution(
                dec,
                state.pool,
                state.router(task, layer),
                state.store,
                state.opt,
                task,
                sigma=cfg.sigma,
                max_evolvable=cfg.max_evolvable,
            )
        for eid, m in sorted(metrics.items()):
            action = "prune" if eid in applied["pruned"] else "keep"
            tlog.trace.append(
                dict(
                    task=task,
                    step=step,
                    layer=layer,
                    expert=eid,
                    I=m.contribution,
                    V=m.instability,
                    f=m.frequency,
                    H_I=base.H_I.get(eid, m.contribution),
                    H_V=base.H_V.get(eid, m.instability),
                    action=action,
                )
            )
        for eid in applied["pruned"]:
            base.forget(eid)
            tel.forget(eid)
            metrics.pop(eid, None)
        scee.update_baselines(base, metrics)
        tel.reset()
        for eid in applied["spawned"]:
            tel.track(eid)
        if applied["pruned"] or applied["spawned"]:
            tlog.events.append(dict(task=task, step=step, layer=layer, **applied))
        if state.router(task, layer).expert_ids != state.pool.ids(layer):
            raise ConsistencyError(f"layer {layer}: router/pool out of sync after evolution at step {step}")


def train_task(state: ModelState, spec: DomainSpec) -> TaskLog:
    cfg = state.config
    task = spec.task
    if state.current_task != task:
        raise ValueError(f"begin_task({task}) must run before train_task")
    batches = _rng(cfg, task, _BATCHES)
    spawn_rng = _rng(cfg, task, _SPAWN)
    x_all, y_all = spec.train.x, spec.train.y
    n = len(x_all)
    bs = min(cfg.batch_size, n)
    window_end = int(cfg.window_fraction * cfg.max_iters)
    tlog = TaskLog(task)
    evolving = cfg.enable_expand or cfg.enable_prune
    for step in range(1, cfg.max_iters + 1):
        idx = batches.choice(n, bs, replace=False)
        loss, outs = task_loss(state, x_all[idx], y_all[idx], task)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"task {task} step {step}: loss is {value}")
        ad.backward(loss)
        tlog.losses.append(value)
        if evolving:
            for layer, out in enumerate(outs):
                routed = dict(zip(out.expert_ids, out.mask.sum(axis=0).tolist()))
                grads = {e.id: e.flat_grad() for e in state.pool.evolvable(layer)}
                state.telemetry[layer].record_step(grads, {k: v for k, v in routed.items() if k in grads}, bs)
        ad.adamw_step(state.store.trainable(), state.opt)
        if evolving and step % cfg.interval == 0:
            evolution_event(state, task, step, spawn_rng, step <= window_end, tlog)
    tlog.counts_after = state.expert_counts()
    return tlog


def end_task(state: ModelState, spec: DomainSpec, protos: pges.TaskPrototypeSet, own_scores: np.ndarray) -> ModelState:
    """Freeze the task's router and surviving experts, register its prototypes, recalibrate delta."""
    task = spec.task
    cfg = state.config
    if cfg.freeze_history:
        for layer in range(state.layers):
            if cfg.router_mode == "task":
                state.router(task, layer).freeze()
            for e in state.pool.evolvable(layer):
                e.freeze()
    state.prototypes = [p for p in state.prototypes if p.task != task] + [protos]
    state.calib_scores[task] = own_scores
    state.delta = pges.calibrate_threshold([state.calib_scores[t] for t in sorted(state.calib_scores)], cfg.percentile)
    state.completed.append(task)
    state.current_task = None
    return state


@dataclass
class StreamRun:
    state: ModelState
    snapshots: list[ModelState]
    logs: list[TaskLog]
    digests: list[dict[int, str]]  # per stage: task -> parameter digest at end of that stage


def run_stream(stream: TaskStream, config: TrainConfig, tasks: list[int] | None = None, on_begin=None) -> StreamRun:
    """Train the tasks in order, snapshotting after each one."""
    state = init_state(stream, config)
    snapshots, logs, digests = [], [], []
    for t in tasks if tasks is not None else range(len(stream)):
        spec = stream[t]
        protos, scores = capture_prototypes(spec, state.encoder, config)
        begin_task(state, spec.task)
        if on_begin is not None:
            on_begin(state, spec)
        tlog = train_task(state, spec)
        end_task(state, spec, protos, scores)
        logs.append(tlog)
        snapshots.append(state.snapshot())
        digests.append({c: state.task_digest(c) for c in state.completed})
        log.info("task %d done: loss %.4f, experts per layer %s", spec.task, tlog.losses[-1], state.expert_counts())
    return StreamRun(state, snapshots, logs, digests)
