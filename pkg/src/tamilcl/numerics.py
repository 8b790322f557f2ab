"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only what the continual-learning engine needs: matrix products, pointwise
arithmetic with bias broadcasting over the batch dimension, the usual
activations, row softmax, and the reductions that the losses are built from.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "SgdOptimizer",
    "tensor",
    "parameter",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "mse",
    "l1_norm",
    "total",
    "mean",
    "take_columns",
    "stopgrad",
    "elementwise",
]


class Tensor:
    """A node on the gradient tape.

    ``data`` is a float64 ndarray. Tensors produced by an op keep references to
    their operands and a closure that maps the output gradient to operand
    gradients; leaves have neither. Gradients accumulate into ``grad`` of leaves
    with ``requires_grad`` when :meth:`backward` runs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def tensor(data) -> Tensor:
    """Constant tensor (no gradient)."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    # Record the backward rule only when some operand participates in the tape.
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=rule)
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    av, bv = a.data, b.data

    def rule(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _node(av @ bv, (a, b), rule)


def _check_binary(a: Tensor, b: Tensor, name: str) -> bool:
    """Return True when ``b`` is a bias row broadcast over the batch of ``a``."""
    if a.shape == b.shape:
        return False
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return True
    raise ValueError(f"{name} dimension mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_binary(a, b, "add")

    def rule(g):
        return (g, g.sum(axis=0) if bias else g)

    return _node(a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_binary(a, b, "sub")

    def rule(g):
        return (g, -(g.sum(axis=0) if bias else g))

    return _node(a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_binary(a, b, "mul")
    av, bv = a.data, b.data

    def rule(g):
        gb = g * av
        return (g * bv, gb.sum(axis=0) if bias else gb)

    return _node(av * bv, (a, b), rule)


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Dispatch ``op`` in {"mul", "add", "sub"}."""
    ops = {"mul": mul, "add": add, "sub": sub}
    if op not in ops:
        raise ValueError(f"unknown elementwise op {op!r}")
    return ops[op](a, b)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _node(t, (a,), lambda g: (g * (1.0 - t * t),))


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(v: Tensor) -> Tensor:
    """Softmax over the last axis (a vector, or each row of a matrix)."""
    v = _as_tensor(v)
    if v.data.size == 0 or v.shape[-1] == 0:
        raise ValueError("softmax of an empty tensor")
    if not np.all(np.isfinite(v.data)):
        raise ValueError("softmax input must be finite")
    s = _softmax_rows(v.data)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (v,), rule)


def log_softmax(v: Tensor) -> Tensor:
    v = _as_tensor(v)
    if v.data.size == 0:
        raise ValueError("log_softmax of an empty tensor")
    z = v.data - v.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def rule(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _node(out, (v,), rule)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects B x C logits, got {logits.shape}")
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {n}")
    if n == 0:
        raise ValueError("cross_entropy of an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def rule(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _node(np.asarray(loss), (logits,), rule)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar."""
    a = _as_tensor(a)
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ValueError("mean of an empty tensor")
    return scale(total(a), 1.0 / n)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    d = sub(a, b)
    return mean(mul(d, d))


def l1_norm(a: Tensor) -> Tensor:
    """Per-row L1 norm of a matrix (or the L1 norm of a vector)."""
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _node(np.abs(a.data).sum(axis=-1), (a,), lambda g: (np.expand_dims(g, -1) * sign,))


def take_columns(a: Tensor, n: int) -> Tensor:
    """First ``n`` columns of a matrix."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or not 0 <= n <= a.shape[1]:
        raise ValueError(f"cannot take {n} columns of {a.shape}")
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[:, :n] = g
        return (full,)

    return _node(a.data[:, :n], (a,), rule)


def stopgrad(a: Tensor) -> Tensor:
    """Same values, cut from the tape: nothing upstream receives gradient."""
    return Tensor(_as_tensor(a).data)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


class SgdOptimizer:
    """Plain SGD: ``p <- p - lr * grad(p)``."""

    def __init__(self, params: Iterable[Tensor], learning_rate: float):
        if not learning_rate >= 0:
            raise ValueError(f"learning_rate must be non-negative, got {learning_rate}")
        self.params = list(params)
        self.learning_rate = float(learning_rate)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        lr = self.learning_rate
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad
