"""Low-rank experts, per-task routers, Top-p gating and the task-aware balance loss."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ConsistencyError, FrozenParameterError, ShapeError


@dataclass
class LoraExpert:
    """``E(x) = x @ down @ up``; no residual inside the expert."""

    id: int
    layer: int
    origin_task: int
    down: ad.Parameter
    up: ad.Parameter

    def __post_init__(self):
        d, r = self.down.shape
        if self.up.shape != (r, d):
            raise ShapeError(f"up projection {self.up.shape} does not match down {self.down.shape}")

    @property
    def frozen(self) -> bool:
        return self.down.frozen and self.up.frozen

    @property
    def rank(self) -> int:
        return self.down.shape[1]

    def params(self) -> tuple[ad.Parameter, ad.Parameter]:
        return self.down, self.up

    def freeze(self) -> None:
        self.down.freeze()
        self.up.freeze()

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        return ad.matmul(ad.matmul(x, self.down), self.up)

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([self.down.grad.ravel(), self.up.grad.ravel()])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.down.data.ravel(), self.up.data.ravel()])


def expert_forward(x, expert: LoraExpert) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != expert.down.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} != expert width {expert.down.shape[0]}")
    return x @ expert.down.data @ expert.up.data


def expert_name(layer: int, expert_id: int) -> str:
    return f"L{layer}.E{expert_id}"


class ExpertPool:
    """Experts per adapter layer; frozen experts always precede evolvable ones."""

    def __init__(self, layers: int, dim: int, rank: int):
        if not 0 < rank < dim:
            raise ConfigError(f"LoRA rank must satisfy 0 < r < D, got r={rank}, D={dim}")
        self.dim = dim
        self.rank = rank
        self.layers: list[list[LoraExpert]] = [[] for _ in range(layers)]
        self.next_id = [0] * layers

    def __len__(self) -> int:
        return len(self.layers)

    def experts(self, layer: int) -> list[LoraExpert]:
        return self.layers[layer]

    def counts(self) -> list[int]:
        return [len(e) for e in self.layers]

    def get(self, layer: int, expert_id: int) -> LoraExpert:
        for e in self.layers[layer]:
            if e.id == expert_id:
                return e
        raise KeyError(f"no expert {expert_id} in layer {layer}")

    def ids(self, layer: int) -> list[int]:
        return [e.id for e in self.layers[layer]]

    def evolvable(self, layer: int) -> list[LoraExpert]:
        return [e for e in self.layers[layer] if not e.frozen]

    def new_expert(
        self,
        store: ad.ParamStore,
        layer: int,
        task: int,
        down: np.ndarray,
        up: np.ndarray,
    ) -> LoraExpert:
        eid = self.next_id[layer]
        self.next_id[layer] += 1
        name = expert_name(layer, eid)
        expert = LoraExpert(
            id=eid,
            layer=layer,
            origin_task=task,
            down=store.create(f"{name}.down", down),
            up=store.create(f"{name}.up", up),
        )
        self.layers[layer].append(expert)
        return expert

    def remove(self, store: ad.ParamStore, layer: int, expert_id: int) -> LoraExpert:
        expert = self.get(layer, expert_id)
        if expert.frozen:
            raise FrozenParameterError(f"expert {expert_id} in layer {layer} is frozen")
        self.layers[layer].remove(expert)
        for p in expert.params():
            store.remove(p.name)
        return expert

    def all_experts(self) -> Iterable[LoraExpert]:
        for layer in self.layers:
            yield from layer


@dataclass
class Router:
    """Single linear layer mapping the routing query to one logit per expert."""

    task: int
    layer: int
    weight: ad.Parameter
    bias: ad.Parameter
    expert_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.check()

    @property
    def width(self) -> int:
        return self.weight.shape[1]

    @property
    def frozen(self) -> bool:
        return self.weight.frozen

    def freeze(self) -> None:
        self.weight.freeze()
        self.bias.freeze()

    def params(self) -> tuple[ad.Parameter, ad.Parameter]:
        return self.weight, self.bias

    def check(self) -> None:
        if not (self.weight.shape[1] == self.bias.shape[0] == len(self.expert_ids)):
            raise ConsistencyError(
                f"router task={self.task} layer={self.layer}: width {self.weight.shape[1]}, "
                f"bias {self.bias.shape[0]}, {len(self.expert_ids)} expert ids"
            )

    def logits(self, query: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.matmul(query, self.weight), self.bias)


def router_name(task: int, layer: int) -> str:
    return f"R{task}.L{layer}"


def new_router(store: ad.ParamStore, task: int, layer: int, dim: int, expert_ids: Sequence[int], name: str | None = None) -> Router:
    base = name or router_name(task, layer)
    n = len(expert_ids)
    return Router(
        task=task,
        layer=layer,
        weight=store.create(f"{base}.W", np.zeros((dim, n))),
        bias=store.create(f"{base}.b", np.zeros(n)),
        expert_ids=list(expert_ids),
    )


def resize_router(
    router: Router,
    add: Sequence[int] = (),
    remove: Iterable[int] = (),
    opt_state: ad.AdamWState | None = None,
) -> Router:
    """Append zero-initialised outputs for ``add`` expert ids and drop outputs at ``remove`` positions.

    Surviving outputs keep their weights bit-for-bit. Optimiser moments of the
    router are re-indexed, with fresh slots zeroed.
    """
    if router.frozen:
        raise FrozenParameterError(f"router for task {router.task} layer {router.layer} is frozen")
    drop = set(int(i) for i in remove)
    if any(i < 0 or i >= router.width for i in drop):
        raise IndexError(f"remove indices {sorted(drop)} out of range for width {router.width}")
    keep = [i for i in range(router.width) if i not in drop]
    if not keep and not add:
        raise ConsistencyError("cannot remove every router output")
    mapping = np.array(keep + [-1] * len(add), dtype=np.int64)
    dim = router.weight.shape[0]
    w = np.zeros((dim, mapping.size))
    b = np.zeros(mapping.size)
    w[:, : len(keep)] = router.weight.data[:, keep]
    b[: len(keep)] = router.bias.data[keep]
    router.weight.assign(w)
    router.bias.assign(b)
    router.expert_ids = [router.expert_ids[i] for i in keep] + list(add)
    if opt_state is not None:
        opt_state.reset_rows(router.weight.name, mapping, w.shape, axis=1)
        opt_state.reset_rows(router.bias.name, mapping, b.shape, axis=0)
    router.check()
    return router


# ------------------------------------------------------------------ gating


@dataclass
class GateResult:
    selected: np.ndarray  # indices in descending-probability order
    weights: np.ndarray
    probs: np.ndarray


def _check_p0(p0: float) -> None:
    if not 0.0 < p0 <= 1.0:
        raise ConfigError(f"top-p threshold must lie in (0, 1], got {p0}")


def top_p_mask(probs: np.ndarray, p0: float) -> np.ndarray:
    """Boolean ``(B, N)`` mask of the smallest descending prefix whose mass exceeds ``p0``.

    Ties are ordered by lower expert index. If rounding keeps the running sum
    from ever exceeding ``p0`` every expert is selected.
    """
    _check_p0(p0)
    probs = np.atleast_2d(probs)
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=1)
    csum = np.cumsum(sorted_p, axis=1)
    # number selected = 1 + count of prefixes whose cumulative mass is still <= p0
    k = np.minimum((csum <= p0).sum(axis=1) + 1, probs.shape[1])
    ranks = np.arange(probs.shape[1])[None, :] < k[:, None]
    mask = np.zeros_like(ranks)
    np.put_along_axis(mask, order, ranks, axis=1)
    return mask


def top_k_mask(probs: np.ndarray, k: int) -> np.ndarray:
    probs = np.atleast_2d(probs)
    k = min(k, probs.shape[1])
    order = np.argsort(-probs, axis=1, kind="stable")
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return mask


def top_p_select(p, p0: float = 0.6) -> GateResult:
    p = np.asarray(p, dtype=np.float64)
    mask = top_p_mask(p[None, :], p0)[0]
    order = np.argsort(-p, kind="stable")
    selected = order[mask[order]]
    w = np.where(mask, p, 0.0)
    w = w / w.sum()
    return GateResult(selected=selected, weights=w, probs=p)


def gate_mask(probs: np.ndarray, routing: str, p0: float) -> np.ndarray:
    if routing == "top_p":
        return top_p_mask(probs, p0)
    if routing == "top2":
        return top_k_mask(probs, 2)
    raise ConfigError(f"unknown routing mode {routing!r}")


# -------------------------------------------------------------- MoE layer


@dataclass
class LayerOutput:
    y: ad.Tensor
    probs: ad.Tensor  # (B, N) routing probabilities
    mask: np.ndarray  # (B, N) selected experts
    expert_ids: list[int]


def moe_forward(
    x: ad.Tensor,
    experts: Sequence[LoraExpert],
    router: Router,
    p0: float = 0.6,
    routing: str = "top_p",
) -> LayerOutput:
    """Residual mixture ``y = x + sum_i w_i E_i(x)`` with the tap feature as routing query."""
    if router.width != len(experts) or [e.id for e in experts] != router.expert_ids:
        raise ConsistencyError(
            f"router task={router.task} layer={router.layer} has width {router.width} "
            f"but {len(experts)} experts were supplied; was the router resized after evolution?"
        )
    x = x if isinstance(x, ad.Tensor) else ad.tensor(np.atleast_2d(x))
    probs = ad.softmax(router.logits(x), axis=1)
    mask = gate_mask(probs.data, routing, p0)
    masked = ad.mul(probs, mask.astype(np.float64))
    w = ad.div(masked, ad.sum(masked, axis=1, keepdims=True))
    y = x
    active = mask.any(axis=0)
    for i, expert in enumerate(experts):
        if not active[i]:
            continue
        y = ad.add(y, ad.mul(w[:, i : i + 1], expert.forward(x)))
    return LayerOutput(y=y, probs=probs, mask=mask, expert_ids=list(router.expert_ids))


# ---------------------------------------------------------- balance loss


@dataclass
class UsageStats:
    counts: np.ndarray  # routed-sample count per expert
    prob_sum: np.ndarray  # summed routing probability per expert
    total: int

    @property
    def f(self) -> np.ndarray:
        return self.counts / self.total

    @property
    def Q(self) -> np.ndarray:
        return self.prob_sum / self.total


def load_balance_loss(counts, prob_sum, total: int, betas) -> ad.Tensor:
    """``N * sum_i beta_i * f_i * Q_i``; only ``Q`` (via ``prob_sum``) carries gradient."""
    if total <= 0:
        raise ValueError("load-balance loss needs at least one routed sample")
    counts = np.asarray(counts, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    n = counts.size
    if betas.shape != counts.shape:
        raise ShapeError(f"{betas.size} betas for {n} experts")
    Q = ad.mul(prob_sum if isinstance(prob_sum, ad.Tensor) else ad.tensor(prob_sum), 1.0 / total)
    coeff = n * betas * counts / total
    return ad.sum(ad.mul(Q, coeff))


def layer_balance_loss(out: LayerOutput, betas) -> ad.Tensor:
    total = out.mask.shape[0]
    return load_balance_loss(out.mask.sum(axis=0), ad.sum(out.probs, axis=0), total, betas)


def params_digest(params: Iterable[ad.Parameter]) -> str:
    digest = hashlib.sha256()
    for p in params:
        digest.update(p.name.encode())
        digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return digest.hexdigest()
