"""Small reverse-mode autodiff over float64 numpy arrays.

The graph is rebuilt on every forward pass (no caching), because the adapter
topology changes whenever experts are spawned or pruned. ``backward`` walks
the recorded graph in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import DimensionError, LookupFailure, NonFiniteError, ShapeError

DTYPE = np.float64


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A node in the computation graph.

    Leaves created with ``requires_grad=False`` act as constants; gradients
    still flow *through* operations on them into any trainable ancestors.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], tuple] | None = None,
        name: str | None = None,
    ):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def tensor(value, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def _lift(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, parents: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (), backward=backward if needs else None)


# ---------------------------------------------------------------- operations


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def take(a: Tensor, index) -> Tensor:
    """Basic numpy indexing (slices, integers) with scatter-add backward."""
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def stable_softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax on plain arrays."""
    z = _as_array(logits)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = stable_softmax(a.data, axis=axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0:
        raise DimensionError("log_softmax of an empty vector")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), backward)


def smoothed_targets(targets, num_classes: int, eps: float) -> np.ndarray:
    targets = np.atleast_1d(np.asarray(targets))
    if num_classes < 1:
        raise DimensionError("need at least one class")
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing must lie in [0, 1), got {eps}")
    if np.any(targets < 0) or np.any(targets >= num_classes):
        raise IndexError(f"target out of range for {num_classes} classes")
    off = eps / (num_classes - 1) if num_classes > 1 else 0.0
    q = np.full((targets.size, num_classes), off, dtype=DTYPE)
    q[np.arange(targets.size), targets] = 1.0 - eps if num_classes > 1 else 1.0
    return q


def label_smoothed_ce(logits: Tensor, targets, eps: float = 0.2) -> Tensor:
    """Mean label-smoothed cross-entropy.

    ``logits`` is ``(C,)`` or ``(B, C)``. The true class gets mass ``1 - eps``
    and every other class ``eps / (C - 1)``.
    """
    logits = _lift(logits)
    batched = logits.data.ndim == 2
    z = logits if batched else reshape(logits, (1, -1))
    q = smoothed_targets(targets, z.shape[1], eps)
    if q.shape[0] != z.shape[0]:
        raise ShapeError(f"{q.shape[0]} targets for {z.shape[0]} rows")
    logp = log_softmax(z, axis=1)
    return mul(sum(mul(logp, q)), -1.0 / z.shape[0])


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # trainable leaf
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ------------------------------------------------------------ parameter store


class Parameter(Tensor):
    """Named leaf tensor with a frozen flag and a persistent gradient buffer."""

    __slots__ = ("frozen",)

    def __init__(self, name: str, data, frozen: bool = False):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=not frozen, name=name)
        self.frozen = frozen
        self.grad = np.zeros_like(self.data)

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        value = np.array(value, dtype=DTYPE, copy=True)
        self.data = value
        self.grad = np.zeros_like(value)


class ParamStore:
    """Ordered mapping of parameter name to :class:`Parameter`."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, value, frozen: bool = False) -> Parameter:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already exists")
        param = Parameter(name, value, frozen=frozen)
        self._params[name] = param
        return param

    def remove(self, name: str) -> None:
        del self._params[name]

    def __getitem__(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise LookupFailure(name) from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if not p.frozen]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()


# ------------------------------------------------------------------- AdamW


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)

    def forget(self, name: str) -> None:
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.steps.pop(name, None)

    def reset_rows(self, name: str, keep: np.ndarray, new_shape: tuple[int, ...], axis: int) -> None:
        """Re-index moments after a router resize; new slots start at zero.

        ``keep`` maps each output slot to the old slot it came from, or -1.
        """
        for moments in (self.m, self.v):
            if name not in moments:
                continue
            old = moments[name]
            new = np.zeros(new_shape, dtype=DTYPE)
            for new_idx, old_idx in enumerate(keep):
                if old_idx >= 0:
                    if axis == 0:
                        new[new_idx] = old[old_idx]
                    else:
                        new[..., new_idx] = old[..., old_idx]
            moments[name] = new


def adamw_step(store: ParamStore | Iterable[Parameter], state: AdamWState) -> None:
    """One bias-corrected AdamW update on every non-frozen parameter, then clear grads.

    Raises :class:`NonFiniteError` before touching anything if any gradient
    is NaN or infinite.
    """
    params = list(store)
    for p in params:
        if not p.frozen and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")

    b1, b2 = state.beta1, state.beta2
    for p in params:
        if p.frozen:
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None or m.shape != p.data.shape:
            m = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
            state.steps[p.name] = 0
        v = state.v[p.name]
        t = state.steps[p.name] + 1
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name], state.steps[p.name] = m, v, t
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        data = p.data
        if state.weight_decay:
            data = data - state.lr * state.weight_decay * data
        p.data = data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    for p in params:
        p.zero_grad()


def numeric_grad(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. every entry of ``array`` (mutated in place)."""
    out = np.zeros_like(array)
    flat = array.reshape(-1)
    res = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        res[i] = (fp - fm) / (2.0 * h)
    return out


__all__ = [
    "AdamWState",
    "Parameter",
    "ParamStore",
    "Tensor",
    "adamw_step",
    "add",
    "backward",
    "div",
    "exp",
    "label_smoothed_ce",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "numeric_grad",
    "reshape",
    "softmax",
    "sqrt",
    "stable_softmax",
    "sub",
    "sum",
    "take",
    "tanh",
    "tensor",
]
