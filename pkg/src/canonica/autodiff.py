"""Reverse-mode automatic differentiation over small dense float64 arrays.

Every op computes its value eagerly when the node is built, so an ordinary
expression such as ``(a * b).sum()`` is already evaluated.  :func:`forward`
re-evaluates a graph after leaf values were changed with :meth:`Node.assign`
(finite-difference checks rely on this), and :func:`backward` refuses to run
on a graph whose cached values are older than one of its leaves.

The mathematical primitives are ``+ - * / exp log sin cos sigmoid softplus
tanh power abs sum matmul``.  ``reshape``, ``transpose``, indexing and
``concat`` only move data around.
"""

from __future__ import annotations

import itertools
from collections import OrderedDict
from typing import Iterable

import numpy as np
from scipy.special import expit

_clock = itertools.count(1)


class GraphError(RuntimeError):
    """Raised for malformed graphs: cycles, stale values, bad seeds."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Node:
    """A value in the computation graph together with its accumulated adjoint."""

    __slots__ = ("value", "_grad", "op", "parents", "requires_grad", "name", "_stamp")

    __array_priority__ = 100.0

    def __init__(self, value, op: "Op | None" = None, parents: tuple = (),
                 requires_grad: bool = False, name: str | None = None):
        self.value = _as_array(value)
        self._grad = None
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self.name = name
        self._stamp = next(_clock)

    # --- leaf handling -------------------------------------------------
    @property
    def is_leaf(self) -> bool:
        return self.op is None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def assign(self, value) -> None:
        """Overwrite a leaf value.  Dependent nodes become stale until forward()."""
        if not self.is_leaf:
            raise GraphError("only leaf nodes can be assigned")
        value = _as_array(value)
        if value.shape != self.value.shape:
            raise ValueError(f"shape mismatch: {value.shape} vs {self.value.shape}")
        self.value = value
        self._stamp = next(_clock)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = self.op.name if self.op is not None else "leaf"
        return f"Node({tag}, shape={self.value.shape}, name={self.name!r})"

    # --- operator sugar ------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def constant(value) -> Node:
    return Node(value)


def parameter(value, name: str | None = None) -> Node:
    return Node(value, requires_grad=True, name=name)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


# --- op definitions ------------------------------------------------------

class Op:
    name = "op"
    needs: tuple | None = None  # per-input "gradient wanted" flags, set by backward()

    def forward(self, *xs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray, out: np.ndarray, *xs: np.ndarray) -> tuple:
        raise NotImplementedError


class _Add(Op):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


class _Sub(Op):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g, out, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


class _Mul(Op):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, g, out, a, b):
        need_a, need_b = self.needs or (True, True)
        return (_unbroadcast(g * b, a.shape) if need_a else None,
                _unbroadcast(g * a, b.shape) if need_b else None)


class _Div(Op):
    name = "div"

    def forward(self, a, b):
        return a / b

    def backward(self, g, out, a, b):
        ga = g / b
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)


class _Exp(Op):
    name = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, g, out, a):
        return (g * out,)


class _Log(Op):
    name = "log"

    def forward(self, a):
        return np.log(a)

    def backward(self, g, out, a):
        return (g / a,)


class _Sin(Op):
    name = "sin"

    def forward(self, a):
        return np.sin(a)

    def backward(self, g, out, a):
        return (g * np.cos(a),)


class _Cos(Op):
    name = "cos"

    def forward(self, a):
        return np.cos(a)

    def backward(self, g, out, a):
        return (-g * np.sin(a),)


class _Sigmoid(Op):
    name = "sigmoid"

    def forward(self, a):
        return expit(a)

    def backward(self, g, out, a):
        return (g * out * (1.0 - out),)


class _Softplus(Op):
    name = "softplus"

    def forward(self, a):
        return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))

    def backward(self, g, out, a):
        return (g * expit(a),)


class _Tanh(Op):
    name = "tanh"

    def forward(self, a):
        return np.tanh(a)

    def backward(self, g, out, a):
        return (g * (1.0 - out * out),)


class _Abs(Op):
    name = "abs"

    def forward(self, a):
        return np.abs(a)

    def backward(self, g, out, a):
        return (g * np.sign(a),)


class _Power(Op):
    name = "power"

    def __init__(self, exponent: float):
        self.exponent = float(exponent)

    def forward(self, a):
        if self.exponent == 2.0:
            return a * a
        return np.power(a, self.exponent)

    def backward(self, g, out, a):
        p = self.exponent
        if p == 2.0:
            return (2.0 * g * a,)
        return (g * p * np.power(a, p - 1.0),)


class _Sum(Op):
    name = "sum"

    def __init__(self, axis, keepdims: bool):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, g, out, a):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, a.shape),)


class _MatMul(Op):
    name = "matmul"

    def forward(self, a, b):
        return a @ b

    def backward(self, g, out, a, b):
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        g2 = g
        if b.ndim == 1:
            g2 = g2[..., None]
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        need_a, need_b = self.needs or (True, True)
        ga = gb = None
        if need_a:
            ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
        if need_b:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
        return ga, gb


class _Reshape(Op):
    name = "reshape"

    def __init__(self, shape):
        self.shape = shape

    def forward(self, a):
        return a.reshape(self.shape)

    def backward(self, g, out, a):
        return (g.reshape(a.shape),)


class _Transpose(Op):
    name = "transpose"

    def __init__(self, axes):
        self.axes = axes

    def forward(self, a):
        return np.transpose(a, self.axes)

    def backward(self, g, out, a):
        if self.axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(self.axes)),)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


class _GetItem(Op):
    name = "getitem"

    def __init__(self, index):
        self.index = index

    def forward(self, a):
        return a[self.index]

    def backward(self, g, out, a):
        full = np.zeros_like(a)
        if _is_advanced(self.index):
            np.add.at(full, self.index, g)
        else:
            full[self.index] += g
        return (full,)


class _Concat(Op):
    name = "concat"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *xs):
        return np.concatenate(xs, axis=self.axis)

    def backward(self, g, out, *xs):
        sizes = np.cumsum([x.shape[self.axis] for x in xs])[:-1]
        return tuple(np.split(g, sizes, axis=self.axis))


def _apply(op: Op, *inputs) -> Node:
    parents = tuple(_lift(x) for x in inputs)
    value = op.forward(*(p.value for p in parents))
    return Node(value, op=op, parents=parents,
                requires_grad=any(p.requires_grad for p in parents))


def add(a, b) -> Node:
    return _apply(_Add(), a, b)


def sub(a, b) -> Node:
    return _apply(_Sub(), a, b)


def mul(a, b) -> Node:
    return _apply(_Mul(), a, b)


def div(a, b) -> Node:
    return _apply(_Div(), a, b)


def exp(a) -> Node:
    return _apply(_Exp(), a)


def log(a) -> Node:
    return _apply(_Log(), a)


def sin(a) -> Node:
    return _apply(_Sin(), a)


def cos(a) -> Node:
    return _apply(_Cos(), a)


def sigmoid(a) -> Node:
    return _apply(_Sigmoid(), a)


def softplus(a) -> Node:
    return _apply(_Softplus(), a)


def tanh(a) -> Node:
    return _apply(_Tanh(), a)


def abs_(a) -> Node:
    return _apply(_Abs(), a)


def power(a, exponent: float) -> Node:
    if isinstance(exponent, Node):
        raise TypeError("power() takes a constant exponent")
    return _apply(_Power(exponent), a)


def sum_(a, axis=None, keepdims: bool = False) -> Node:
    return _apply(_Sum(axis, keepdims), a)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = _lift(a)
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.value.shape[k] for k in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def matmul(a, b) -> Node:
    return _apply(_MatMul(), a, b)


def reshape(a, shape) -> Node:
    return _apply(_Reshape(tuple(shape)), a)


def transpose(a, axes=None) -> Node:
    return _apply(_Transpose(None if axes is None else tuple(axes)), a)


def getitem(a, index) -> Node:
    return _apply(_GetItem(index), a)


def concat(nodes: Iterable, axis: int = -1) -> Node:
    nodes = list(nodes)
    if len(nodes) == 1:
        return _lift(nodes[0])
    return _apply(_Concat(axis), *nodes)


def square(a) -> Node:
    return power(a, 2.0)


# --- graph traversal -----------------------------------------------------

def topological_order(root: Node) -> list[Node]:
    """Parents-before-children ordering of every node reachable from root."""
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for p in node.parents:
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError(f"cycle detected at {p!r}")
            if ps is None:
                stack.append((p, False))
    return order


def forward(root: Node) -> np.ndarray:
    """Re-evaluate every op reachable from root from its current leaf values."""
    for node in topological_order(root):
        if node.op is not None:
            node.value = node.op.forward(*(p.value for p in node.parents))
            node._stamp = next(_clock)
    return root.value


def backward(root: Node, seed=None) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node needing it.

    Returns a map from each gradient-requiring leaf to its accumulated gradient.
    """
    order = topological_order(root)
    for node in order:
        if node.op is not None and any(p._stamp > node._stamp for p in node.parents):
            raise GraphError("graph values are stale; call forward() before backward()")
    if seed is None:
        if root.value.size != 1:
            raise GraphError("a non-scalar root needs an explicit seed")
        seed = np.ones_like(root.value)
    adjoint: dict[int, np.ndarray] = {id(root): _as_array(seed)}
    leaves: dict[Node, np.ndarray] = {}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        node._grad = g if node._grad is None else node._grad + g
        if node.op is None:
            leaves[node] = node._grad
            continue
        node.op.needs = tuple(p.requires_grad for p in node.parents)
        pgrads = node.op.backward(g, node.value, *(p.value for p in node.parents))
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            prev = adjoint.get(k)
            adjoint[k] = pg if prev is None else prev + pg
    return leaves


# --- parameters and Adam ---------------------------------------------------

class ParamStore:
    """Named parameter leaves with Adam moment buffers."""

    def __init__(self):
        self.params: "OrderedDict[str, Node]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        node = parameter(np.array(value, dtype=np.float64), name=name)
        self.params[name] = node
        self.m[name] = np.zeros_like(node.value)
        self.v[name] = np.zeros_like(node.value)
        return node

    def __getitem__(self, name: str) -> Node:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for node in self.params.values():
            node.zero_grad()

    def num_values(self) -> int:
        return sum(p.value.size for p in self.params.values())


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update from the gradients stored on the leaves.

    Gradients are zeroed afterwards.  Nothing is modified if any gradient is
    non-finite.
    """
    for name, node in params.items():
        if node._grad is not None and not np.all(np.isfinite(node._grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    params.step += 1
    t = params.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, node in params.items():
        g = node.grad
        m = params.m[name]
        v = params.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        node.assign(node.value - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        node.zero_grad()
    return params
