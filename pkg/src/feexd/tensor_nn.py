"""Small float64 tensor engine with reverse-mode differentiation.

Only the handful of operations the federated early-exit protocol needs are
provided: affine layers, ReLU, row softmax, cross-entropy, KL divergence and a
few arithmetic helpers. Every op records a closure that maps the upstream
gradient to gradients of its inputs; :func:`backward` walks the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"empty dimension in shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only scalar scaling is supported")
        return scale(self, float(other))

    __rmul__ = __mul__


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, parents=parents if requires else (),
                  backward_fn=backward_fn if requires else None)


class ParamSet(dict):
    """Ordered name -> array mapping (insertion order is the canonical order)."""

    def copy(self) -> "ParamSet":
        return ParamSet((k, np.array(v, dtype=np.float64, copy=True)) for k, v in self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v, dtype=np.float64)) for k, v in self.items())

    def subset(self, names: Iterable[str]) -> "ParamSet":
        # shares the underlying arrays
        return ParamSet((k, self[k]) for k in names)

    def size(self) -> int:
        return int(sum(np.size(v) for v in self.values()))

    def flat(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in self.values()])


@dataclass
class OptimizerState:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.99
    velocity: ParamSet = field(default_factory=ParamSet)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    @classmethod
    def for_params(cls, params: ParamSet, **kwargs) -> "OptimizerState":
        return cls(velocity=params.zeros_like(), **kwargs)


# ---------------------------------------------------------------- operations


def affine_forward(x, W, b) -> Tensor:
    x, W, b = _wrap(x), _wrap(W), _wrap(b)
    if x.data.ndim != 2 or W.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError("affine expects x[batch, d_in], W[d_in, d_out], b[d_out]")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data

    def back(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _node(xd @ Wd + b.data, (x, W, b), back)


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), (x,), back)


def softmax(logits) -> Tensor:
    z = _wrap(logits)
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (z,), back)


def cross_entropy(probs, labels) -> Tensor:
    p = _wrap(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = p.shape
    if labels.shape != (n,):
        raise ShapeError("labels must have one entry per row")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"label out of range [0, {c})")
    rows = np.arange(n)
    picked = p.data[rows, labels]
    floored = np.maximum(picked, PROB_FLOOR)
    value = -np.log(floored).mean()

    def back(g):
        grad = np.zeros_like(p.data)
        live = picked > PROB_FLOOR
        grad[rows[live], labels[live]] = -g / (n * picked[live])
        return (grad,)

    return _node(value, (p,), back)


def kl_divergence(p, q) -> Tensor:
    """Batch mean of KL(p || q) with zero-mass terms dropped and q floored."""
    p, q = _wrap(p), _wrap(q)
    if p.shape != q.shape:
        raise ShapeError(f"kl shapes differ: {p.shape} vs {q.shape}")
    n = p.shape[0]
    live = p.data > PROB_FLOOR
    q_live = q.data > PROB_FLOOR
    qf = np.maximum(q.data, PROB_FLOOR)
    safe_p = np.where(live, p.data, 1.0)
    log_ratio = np.where(live, np.log(safe_p) - np.log(qf), 0.0)
    value = (np.where(live, p.data, 0.0) * log_ratio).sum() / n

    def back(g):
        gp = np.where(live, log_ratio + 1.0, 0.0) * (g / n)
        gq = np.where(live & q_live, -p.data / qf, 0.0) * (g / n)
        return gp, gq

    return _node(value, (p, q), back)


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def back(g):
        return g, g

    return _node(a.data + b.data, (a, b), back)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)

    def back(g):
        return (g * c,)

    return _node(a.data * c, (a,), back)


def tensor_sum(a) -> Tensor:
    a = _wrap(a)
    shape = a.shape

    def back(g):
        return (np.full(shape, g, dtype=np.float64),)

    return _node(a.data.sum(), (a,), back)


def add_all(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        raise ValueError("nothing to sum")
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


# ---------------------------------------------------------------- backprop


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: ParamSet) -> ParamSet:
    """Gradients of a scalar ``loss`` w.r.t. each leaf tensor in ``params``.

    Leaves that the loss does not depend on get an all-zero gradient.
    """
    if loss.data.ndim != 0:
        raise ShapeError("backward needs a scalar loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    out = ParamSet()
    for name, leaf in params.items():
        g = grads.get(id(leaf))
        out[name] = np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64)
    return out


def sgd_step(params: ParamSet, grads: ParamSet, state: OptimizerState) -> ParamSet:
    """Momentum SGD with coupled weight decay, applied in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity shape mismatch for {name}")
        v *= state.momentum
        v += g + state.weight_decay * p
        p -= state.learning_rate * v
    return params


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity needs equal-length vectors")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))
