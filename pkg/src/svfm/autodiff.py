"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: enough operations for MLP vector fields,
unrolled Runge-Kutta solves and the trajectory losses.  Gradients are exact
derivatives of the computed arithmetic (discretize-then-optimize); solver
step sizes and random draws enter the graph as constants.

A "tape" here is the implicit graph hanging off each traced tensor.  It is
consumed by :func:`backward` and cleared afterwards so unrolled solves do not
accumulate memory across training steps.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import backend as K


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Operand values outside an operation's domain (e.g. log of x <= 0)."""


class TapeError(RuntimeError):
    """Backward called on a non-scalar root or an already-consumed tape."""


_grad_enabled = True


class no_grad:
    """Context manager disabling tracing; inference paths skip tape costs."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Immutable dense array of finite float64 values.

    ``_parents``/``_vjp`` form the tape: ``_vjp(grad_out)`` returns the
    gradient contribution for each parent.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _op == "leaf" and not np.all(np.isfinite(arr)):
            raise DomainError("tensor values must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)}, op={self._op})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(op, data, parents, vjp):
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, _op=op)
    return Tensor(data, _op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, sa, sb):
    try:
        np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast") from None


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    if a.shape == b.shape:
        out = K.add(a.data, b.data)
    elif a.data.ndim == 2 and b.data.ndim in (1, 2) and b.data.size == a.data.shape[1]:
        out = K.add_rowvec(a.data, b.data)
    else:
        out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    out = K.sub(a.data, b.data) if a.shape == b.shape else a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(as_tensor(a), float(b))
    if isinstance(a, (int, float)):
        return scale(as_tensor(b), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    out = K.mul(a.data, b.data) if a.shape == b.shape else a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", out, (a, b), vjp)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(as_tensor(a), 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise DomainError("div: zero divisor")
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make("div", out, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    out = K.scale(a.data, s)

    def vjp(g):
        return (K.scale(g, s),)

    return _make("scale", out, (a,), vjp)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    out = K.matmul(a.data, b.data)

    def vjp(g):
        return K.matmul_nt(g, b.data), K.matmul_tn(a.data, g)

    return _make("matmul", out, (a, b), vjp)


# -- elementwise nonlinearities ------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = K.relu(a.data)

    def vjp(g):
        return (K.relu_bwd(a.data, g),)

    return _make("relu", out, (a,), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    if np.max(a.data, initial=-np.inf) > 700.0:
        raise DomainError("exp: operand too large, result would overflow")
    out = K.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make("exp", out, (a,), vjp)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.min(a.data, initial=np.inf) <= 0.0:
        raise DomainError("log: operand must be strictly positive")
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make("log", out, (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = K.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (a,), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    out = K.mul(a.data, a.data)

    def vjp(g):
        return (2.0 * g * a.data,)

    return _make("square", out, (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.min(a.data, initial=np.inf) < 0.0:
        raise DomainError("sqrt: operand must be nonnegative")
    out = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * np.maximum(out, 1e-300)),)

    return _make("sqrt", out, (a,), vjp)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        sig = _expit(a.data)
        return (g * sig,)

    return _make("softplus", out, (a,), vjp)


def _expit(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _expit(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (a,), vjp)


ELEMENTWISE_KINDS = ("add", "sub", "mul", "relu", "exp", "log", "tanh", "square")


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name; the thin uniform surface over the ops above."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "relu": relu,
        "exp": exp,
        "log": log,
        "tanh": tanh,
        "square": square,
    }
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*args)


# -- reductions and shape ops ---------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make("sum", out, (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a) -> Tensor:
    """Stable softmax over the trailing axis."""
    a = as_tensor(a)
    if a.data.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    flat = a.data.reshape(-1, a.shape[-1])
    out = K.softmax2(flat).reshape(a.shape)

    def vjp(g):
        y2 = out.reshape(-1, a.shape[-1])
        g2 = np.ascontiguousarray(g.reshape(-1, a.shape[-1]))
        return (K.softmax2_bwd(y2, g2).reshape(a.shape),)

    return _make("softmax", out, (a,), vjp)


def logsumexp(a, keepdims=False) -> Tensor:
    """log(sum(exp(x))) over the trailing axis, max-shifted for stability."""
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    out = np.log(np.exp(a.data - m).sum(axis=-1, keepdims=True)) + m
    if not keepdims:
        out = out.squeeze(-1)

    def vjp(g):
        soft = np.exp(a.data - m)
        soft /= soft.sum(axis=-1, keepdims=True)
        gg = g if keepdims else np.expand_dims(g, -1)
        return (soft * gg,)

    return _make("logsumexp", out, (a,), vjp)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    widths = [t.shape[axis] for t in tensors]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, np.cumsum(widths)[:-1], axis=axis))

    return _make("concat", out, tensors, vjp)


def narrow(a, start: int, width: int, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + width)
    out = a.data[tuple(idx)].copy()

    def vjp(g):
        full = np.zeros(a.shape)
        full[tuple(idx)] = g
        return (full,)

    return _make("narrow", out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), vjp)


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# -- the backward pass -----------------------------------------------------


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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


def backward(root: Tensor, store=None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    The tape is consumed: parent links are severed afterwards so memory from
    unrolled solves is released, and a second call raises.
    """
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise TapeError("backward root is not traced (no tape)")
    if root._op == "consumed":
        raise TapeError("tape already consumed by a previous backward call")

    if store is not None:
        store.zero_grad()

    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.grad is None:
                node.grad = np.zeros(node.shape)
            node.grad = node.grad + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg

    for node in order:
        node._parents = ()
        node._vjp = None
        node._op = "consumed"


# -- parameter store --------------------------------------------------------


class ParameterStore:
    """Named parameter slots with matching gradient slots.

    One store belongs to one training run; tensors handed out are the live
    parameter leaves (``requires_grad=True``) that :func:`backward` fills.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, path: str, values) -> Tensor:
        if path in self._params:
            raise KeyError(f"parameter {path!r} already exists")
        t = Tensor(values, requires_grad=True)
        t.grad = np.zeros(t.shape)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self):
        return len(self._params)

    def paths(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros(t.shape)

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def set_values(self, path: str, values: np.ndarray):
        t = self._params[path]
        arr = np.asarray(values, dtype=np.float64)
        if arr.shape != t.data.shape:
            raise ShapeError(f"set_values: shape {arr.shape} != {t.data.shape} for {path!r}")
        t.data = arr

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self._params.items()}

    def load(self, values: dict[str, np.ndarray]):
        for p, arr in values.items():
            self.set_values(p, arr)

    # JSON round trips are bit-exact: repr of a finite double parses back to
    # the same double.
    def to_json(self) -> str:
        doc = {
            "params": {
                p: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                for p, t in sorted(self._params.items())
            }
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ParameterStore":
        doc = json.loads(text)
        store = cls()
        for path, slot in doc["params"].items():
            arr = np.asarray(slot["values"], dtype=np.float64).reshape(slot["shape"])
            store.create(path, arr)
        return store


def finite_difference_grads(loss_fn, store: ParameterStore, eps: float = 1e-5):
    """Central-difference gradients of ``loss_fn()`` wrt every store value.

    The independent oracle for :func:`backward`; evaluates the loss twice per
    parameter component, so keep models small.
    """
    grads = {}
    for path, t in store.items():
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_fn()
            flat[i] = orig - eps
            lo = loss_fn()
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        grads[path] = g.reshape(t.shape)
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> float:
    worst = 0.0
    for path, g in analytic.items():
        n = numeric[path]
        denom = np.maximum(np.abs(g) + np.abs(n), floor)
        worst = max(worst, float(np.max(np.abs(g - n) / denom)))
    return worst
