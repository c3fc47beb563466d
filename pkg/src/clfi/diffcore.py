"""Reverse-mode automatic differentiation over float64 numpy arrays, and Adam.

A :class:`Tape` records a fixed set of primitives in execution order. Calling
:meth:`Tape.backward` on a scalar node walks the record in reverse and fills in
the adjoint of every node that depends on a parameter.

Model code is written against an "ops" object. A :class:`Tape` is one such
object (it returns :class:`Node`s); :data:`np_ops` is another, operating on bare
arrays with no recording, for cheap evaluation inside samplers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

import numpy as np


class ContractViolation(ValueError):
    """Bad shapes, empty inputs, or other caller errors."""


class NumericFailure(FloatingPointError):
    """A NaN or infinity appeared where finite values were required."""


class Node:
    __slots__ = ("tape", "index", "value", "op", "parents", "vjp", "requires_grad")

    def __init__(self, tape, value, op, parents=(), vjp=None, requires_grad=False):
        self.tape = tape
        self.index = len(tape.nodes)
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index} {self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.mul(self, -1.0)

    def __sub__(self, other):
        return self.tape.add(self, self.tape.mul(other, -1.0))

    def __rsub__(self, other):
        return self.tape.add(other, self.tape.mul(self, -1.0))


def _unbroadcast(g, shape):
    # Only scalar-vs-array broadcasting is supported, plus bias rows.
    if g.shape == shape:
        return g
    if len(shape) == 0 or (len(shape) == 1 and shape[0] == 1 and g.ndim >= 1 and g.shape != shape):
        return np.array(g.sum()).reshape(shape)
    if g.ndim == len(shape) + 1 and g.shape[1:] == shape:
        return g.sum(axis=0)
    raise ContractViolation(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_binary_shapes(a, b):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if a.size == 1 or b.size == 1:
        return
    # row-vector against a batch, e.g. (n, d) with (d,)
    if a.shape[1:] == b.shape or b.shape[1:] == a.shape:
        return
    raise ContractViolation(f"elementwise op on mismatched shapes {a.shape} and {b.shape}")


class Tape:
    """Record of primitive operations; also usable as an ops backend."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.adjoints: dict[int, np.ndarray] = {}

    # leaves
    def param(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64), "param", requires_grad=True)

    def const(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64), "const")

    def _lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise ContractViolation("node belongs to a different tape")
            return x
        return self.const(x)

    def _emit(self, value, op, parents, vjp):
        req = any(p.requires_grad for p in parents)
        return Node(self, value, op, tuple(parents), vjp if req else None, req)

    # primitives
    def affine(self, x, w, b=None) -> Node:
        x, w = self._lift(x), self._lift(w)
        parents = [x, w]
        out = x.value @ w.value
        if b is not None:
            b = self._lift(b)
            parents.append(b)
            out += b.value

        def vjp(g):
            grads = [
                g @ w.value.T if x.requires_grad else None,
                x.value.T @ g if w.requires_grad else None,
            ]
            if b is not None:
                grads.append(g.sum(axis=0) if b.requires_grad else None)
            return grads

        return self._emit(out, "affine", parents, vjp)

    def masked_affine(self, x, w, mask, b=None) -> Node:
        x, w = self._lift(x), self._lift(w)
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != w.value.shape:
            raise ContractViolation(f"mask shape {mask.shape} != weight shape {w.value.shape}")
        wm = w.value * mask
        parents = [x, w]
        out = x.value @ wm
        if b is not None:
            b = self._lift(b)
            parents.append(b)
            out += b.value

        def vjp(g):
            grads = [
                g @ wm.T if x.requires_grad else None,
                (x.value.T @ g) * mask if w.requires_grad else None,
            ]
            if b is not None:
                grads.append(g.sum(axis=0) if b.requires_grad else None)
            return grads

        return self._emit(out, "masked_affine", parents, vjp)

    def tanh(self, x) -> Node:
        x = self._lift(x)
        out = np.tanh(x.value)
        return self._emit(out, "tanh", [x], lambda g: [g * (1.0 - out * out)])

    def relu(self, x) -> Node:
        x = self._lift(x)
        out = np.maximum(x.value, 0.0)
        return self._emit(out, "relu", [x], lambda g: [np.where(out > 0, g, 0.0)])

    def exp(self, x) -> Node:
        x = self._lift(x)
        out = np.exp(x.value)
        return self._emit(out, "exp", [x], lambda g: [g * out])

    def log(self, x) -> Node:
        x = self._lift(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x.value)
        return self._emit(out, "log", [x], lambda g: [g / x.value])

    def sum(self, x, axis=None) -> Node:
        x = self._lift(x)
        out = np.asarray(x.value.sum(axis=axis))

        def vjp(g):
            if axis is None:
                return [np.broadcast_to(g, x.value.shape).copy()]
            return [np.broadcast_to(np.expand_dims(g, axis), x.value.shape).copy()]

        return self._emit(out, "sum", [x], vjp)

    def logsumexp(self, x, axis=-1) -> Node:
        x = self._lift(x)
        if x.value.size == 0 or x.value.shape[axis] == 0:
            raise ContractViolation("logsumexp of an empty array")
        out = _lse(x.value, axis)

        def vjp(g):
            soft = np.exp(x.value - np.expand_dims(out, axis))
            return [soft * np.expand_dims(g, axis)]

        return self._emit(out, "logsumexp", [x], vjp)

    def concat(self, xs, axis=-1) -> Node:
        xs = [self._lift(x) for x in xs]
        out = np.concatenate([x.value for x in xs], axis=axis)
        splits = np.cumsum([x.value.shape[axis] for x in xs])[:-1]
        return self._emit(out, "concat", xs, lambda g: np.split(g, splits, axis=axis))

    def add(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        _check_binary_shapes(a.value, b.value)
        return self._emit(
            a.value + b.value, "add", [a, b],
            lambda g: [_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)],
        )

    def mul(self, a, b) -> Node:
        a, b = self._lift(a), self._lift(b)
        _check_binary_shapes(a.value, b.value)
        return self._emit(
            a.value * b.value, "mul", [a, b],
            lambda g: [_unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)],
        )

    def reshape(self, x, shape) -> Node:
        x = self._lift(x)
        return self._emit(x.value.reshape(shape), "reshape", [x], lambda g: [g.reshape(x.value.shape)])

    # derived helpers built from primitives
    def square(self, x) -> Node:
        return self.mul(x, x)

    def clamp_soft(self, x, bound: float) -> Node:
        return self.mul(self.tanh(self.mul(x, 1.0 / bound)), bound)

    # reverse pass
    def check_finite(self, out: Node):
        if np.all(np.isfinite(out.value)):
            return
        for node in self.nodes[: out.index + 1]:
            if not np.all(np.isfinite(node.value)) and node.op not in ("const",):
                raise NumericFailure(f"non-finite value produced at {node!r}")
        raise NumericFailure(f"non-finite value produced at {out!r}")

    def backward(self, out: Node) -> dict[int, np.ndarray]:
        if out.value.size != 1:
            raise ContractViolation(f"backward needs a scalar output, got shape {out.value.shape}")
        self.check_finite(out)
        adj = {out.index: np.ones_like(out.value)}
        for node in reversed(self.nodes[: out.index + 1]):
            g = adj.pop(node.index, None) if node.vjp is not None else adj.get(node.index)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.index in adj:
                    adj[parent.index] = adj[parent.index] + pg
                else:
                    adj[parent.index] = pg
        self.adjoints = adj
        return adj

    def grad(self, node: Node) -> np.ndarray:
        return self.adjoints.get(node.index, np.zeros_like(node.value))


def _lse(v, axis=-1):
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(v - m), axis=axis))


class _NumpyOps:
    """Same surface as :class:`Tape`, on bare arrays, recording nothing."""

    @staticmethod
    def param(value):
        return np.asarray(value, dtype=np.float64)

    const = param

    @staticmethod
    def affine(x, w, b=None):
        out = x @ w
        return out if b is None else out + b

    @staticmethod
    def masked_affine(x, w, mask, b=None):
        out = x @ (w * mask)
        return out if b is None else out + b

    tanh = staticmethod(np.tanh)
    exp = staticmethod(np.exp)
    log = staticmethod(np.log)

    @staticmethod
    def relu(x):
        return np.maximum(x, 0.0)

    @staticmethod
    def sum(x, axis=None):
        return np.sum(x, axis=axis)

    @staticmethod
    def logsumexp(x, axis=-1):
        x = np.asarray(x, dtype=np.float64)
        if x.size == 0:
            raise ContractViolation("logsumexp of an empty array")
        return _lse(x, axis)

    @staticmethod
    def concat(xs, axis=-1):
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def mul(a, b):
        return a * b

    @staticmethod
    def reshape(x, shape):
        return np.reshape(x, shape)

    @staticmethod
    def square(x):
        return x * x

    @staticmethod
    def clamp_soft(x, bound):
        return np.tanh(x / bound) * bound


np_ops = _NumpyOps()


def logsumexp(v) -> float:
    """Stable log(sum(exp(v))) of a nonempty finite vector."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ContractViolation("logsumexp of an empty vector")
    return float(_lse(v))


Params = dict[str, np.ndarray]


def value_and_grad(fn: Callable[[Tape, dict[str, Node]], Node], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn`` on a fresh tape and return (value, grads by name)."""
    tape = Tape()
    leaves = {k: tape.param(v) for k, v in params.items()}
    out = fn(tape, leaves)
    tape.backward(out)
    return float(out.value), {k: tape.grad(n) for k, n in leaves.items()}


def grad_scalar(expr: Callable[[Tape, Node], Node], at) -> tuple[float, np.ndarray]:
    """Gradient of a scalar expression of one array argument."""
    value, grads = value_and_grad(lambda t, p: expr(t, p["x"]), {"x": np.asarray(at, dtype=np.float64)})
    return value, grads["x"]


@dataclass
class AdamState:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


ArrayOrParams = Union[np.ndarray, Params]


def adam_step(params: ArrayOrParams, grads: ArrayOrParams, state: AdamState):
    """One bias-corrected Adam update. Returns new params and a new state; inputs are not mutated."""
    single = isinstance(params, np.ndarray)
    p = {"": params} if single else params
    g = {"": grads} if single else grads
    if set(p) != set(g):
        raise ContractViolation("params and grads have different keys")
    t = state.step_count + 1
    m1, m2, new = {}, {}, {}
    for k, value in p.items():
        gk = np.asarray(g[k], dtype=np.float64)
        if gk.shape != value.shape:
            raise ContractViolation(f"grad shape {gk.shape} != param shape {value.shape} for {k!r}")
        prev1 = state.first_moment.get(k, np.zeros_like(value))
        prev2 = state.second_moment.get(k, np.zeros_like(value))
        if prev1.shape != value.shape:
            raise ContractViolation(f"moment shape mismatch for {k!r}")
        m1[k] = state.beta1 * prev1 + (1 - state.beta1) * gk
        m2[k] = state.beta2 * prev2 + (1 - state.beta2) * gk * gk
        mhat = m1[k] / (1 - state.beta1**t)
        vhat = m2[k] / (1 - state.beta2**t)
        new[k] = value - state.learning_rate * mhat / (np.sqrt(vhat) + state.epsilon)
    new_state = AdamState(state.learning_rate, state.beta1, state.beta2, state.epsilon, t, m1, m2)
    return (new[""] if single else new), new_state


def numeric_grad(fn: Callable[[Mapping[str, np.ndarray]], float], params: Mapping[str, np.ndarray], h: float = 1e-5):
    """Central finite differences of a scalar function of named arrays."""
    out = {}
    for k, v in params.items():
        g = np.zeros_like(v, dtype=np.float64)
        for i in np.ndindex(v.shape):
            shifted = {kk: vv.copy() for kk, vv in params.items()}
            shifted[k][i] = v[i] + h
            up = fn(shifted)
            shifted[k][i] = v[i] - h
            down = fn(shifted)
            g[i] = (up - down) / (2 * h)
        out[k] = g
    return out


def grad_rel_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]) -> float:
    """||a - n|| / max(||a||, ||n||) over all arrays jointly."""
    a = np.concatenate([np.ravel(analytic[k]) for k in numeric])
    n = np.concatenate([np.ravel(numeric[k]) for k in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)
