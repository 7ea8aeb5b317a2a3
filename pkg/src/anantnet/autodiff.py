"""Reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to a :class:`Var` together
with the vector-Jacobian products of that primitive.  Replaying the tape
backwards from a scalar root gives exact gradients with respect to any
recorded leaf.

All module-level operations accept plain numpy arrays as well; when no
operand is a ``Var`` they return plain numpy results, so the same network
code serves fast evaluation and differentiable evaluation.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "value_of",
    "is_var",
    "custom",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "tanh",
    "sin",
    "cos",
    "exp",
    "sigmoid",
    "clip",
    "sum",
    "mean",
    "reshape",
    "einsum",
]


class _Indexed:
    """Gradient contribution that touches only ``key`` of the parent."""

    __slots__ = ("key", "grad")

    def __init__(self, key, grad):
        self.key = key
        self.grad = grad


def _is_basic_index(key) -> bool:
    if isinstance(key, (int, np.integer, slice)) or key is Ellipsis or key is None:
        return True
    if isinstance(key, tuple):
        return all(_is_basic_index(k) for k in key)
    return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Linear record of a differentiable computation.

    A tape belongs to one thread from recording to replay.
    """

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[tuple] = []
        self._shapes: list[tuple] = []

    def __len__(self) -> int:
        return len(self._shapes)

    def leaf(self, value) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        return self._record(value, (), ())

    def _record(self, value, parents, vjps) -> "Var":
        index = len(self._shapes)
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(tuple(vjps))
        self._shapes.append(np.shape(value))
        return Var(value, self, index)

    def gradient(self, root: "Var", wrt, seed: float = 1.0) -> list[np.ndarray]:
        """Adjoints of the scalar ``root`` with respect to each var in ``wrt``."""
        if root.tape is not self:
            raise ValueError("root was recorded on a different tape")
        if np.size(root.value) != 1:
            raise ValueError(f"gradient root must be scalar, got shape {np.shape(root.value)}")
        n = root.index + 1
        adj: list = [None] * n
        owned = [False] * n
        adj[root.index] = np.full(self._shapes[root.index], float(seed))
        owned[root.index] = True
        for idx in range(root.index, -1, -1):
            g = adj[idx]
            if g is None:
                continue
            for p, vjp in zip(self._parents[idx], self._vjps[idx]):
                if vjp is None:
                    continue
                contrib = vjp(g)
                shape = self._shapes[p]
                if isinstance(contrib, _Indexed):
                    if adj[p] is None:
                        adj[p] = np.zeros(shape)
                        owned[p] = True
                    elif not owned[p]:
                        adj[p] = np.array(adj[p], dtype=np.float64)
                        owned[p] = True
                    if _is_basic_index(contrib.key):
                        adj[p][contrib.key] += contrib.grad
                    else:
                        np.add.at(adj[p], contrib.key, contrib.grad)
                    continue
                contrib = _unbroadcast(np.asarray(contrib, dtype=np.float64), shape)
                if adj[p] is None:
                    adj[p] = contrib
                elif owned[p]:
                    adj[p] += contrib
                else:
                    adj[p] = adj[p] + contrib
                    owned[p] = True
        out = []
        for w in wrt:
            if w.tape is not self:
                raise ValueError("gradient requested for a var from a different tape")
            g = adj[w.index] if w.index < n else None
            out.append(np.zeros(self._shapes[w.index]) if g is None else np.asarray(g))
        return out


class Var:
    """A recorded array value."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape, index: int):
        self.value = value
        self.tape = tape
        self.index = index

    def __repr__(self) -> str:
        return f"Var(shape={np.shape(self.value)}, index={self.index})"

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def size(self):
        return np.size(self.value)

    @property
    def T(self):
        return transpose(self)

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
        return neg(self)

    def __pow__(self, n):
        return power(self, n)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    """Underlying numpy value of a var, or ``x`` itself."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def custom(value, *pairs) -> Var:
    """Record ``value`` as a primitive of the var operands in ``pairs``.

    Each pair is ``(operand, vjp)``; non-var operands are ignored.
    """
    pairs = [(p, f) for p, f in pairs if isinstance(p, Var)]
    if not pairs:
        return value
    tape = _tape_of(*(p for p, _ in pairs))
    return tape._record(value, [p for p, _ in pairs], [f for _, f in pairs])


def _binary(a, b, value, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    if tape is None:
        return value
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(vjp_a)
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(vjp_b)
    return tape._record(value, parents, vjps)


def add(a, b):
    return _binary(a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av / bv, lambda g: g / bv, lambda g: -g * av / (bv * bv))


def neg(a):
    if not isinstance(a, Var):
        return -a
    return a.tape._record(-a.value, [a], [lambda g: -g])


def power(a, n: int):
    av = value_of(a)
    out = av**n
    if not isinstance(a, Var):
        return out
    return a.tape._record(out, [a], [lambda g: g * n * av ** (n - 1)])


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv

    def vjp_a(g):
        if np.ndim(bv) == 1:
            return np.multiply.outer(g, bv)
        return g @ np.swapaxes(bv, -1, -2)

    def vjp_b(g):
        if np.ndim(bv) == 1:
            return np.tensordot(av, g, axes=(tuple(range(av.ndim - 1)), tuple(range(g.ndim))))
        if np.ndim(av) > 2 and np.ndim(bv) == 2:
            a2 = av.reshape(-1, av.shape[-1])
            return a2.T @ g.reshape(-1, g.shape[-1])
        return np.swapaxes(av, -1, -2) @ g

    return _binary(a, b, out, vjp_a, vjp_b)


def _unary(a, value, vjp):
    if not isinstance(a, Var):
        return value
    return a.tape._record(value, [a], [vjp])


def tanh(a):
    y = np.tanh(value_of(a))
    return _unary(a, y, lambda g: g * (1.0 - y * y))


def sin(a):
    av = value_of(a)
    return _unary(a, np.sin(av), lambda g: g * np.cos(av))


def cos(a):
    av = value_of(a)
    return _unary(a, np.cos(av), lambda g: -g * np.sin(av))


def exp(a):
    y = np.exp(value_of(a))
    return _unary(a, y, lambda g: g * y)


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * value_of(a)))
    return _unary(a, y, lambda g: g * y * (1.0 - y))


def clip(a, lo: float, hi: float):
    av = value_of(a)
    mask = (av >= lo) & (av <= hi)
    return _unary(a, np.clip(av, lo, hi), lambda g: g * mask)


def transpose(a):
    return _unary(a, np.swapaxes(value_of(a), -1, -2), lambda g: np.swapaxes(g, -1, -2))


def reshape(a, shape):
    av = value_of(a)
    old = np.shape(av)
    return _unary(a, np.reshape(av, shape), lambda g: np.reshape(g, old))


def getitem(a, key):
    av = value_of(a)
    return _unary(a, av[key], lambda g: _Indexed(key, g))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    shape = np.shape(av)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _unary(a, np.sum(av, axis=axis, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    count = np.size(av) if axis is None else np.prod([np.shape(av)[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def einsum(subscripts: str, *operands):
    """``np.einsum`` with explicit output; no repeated index within one operand."""
    if "->" not in subscripts:
        raise ValueError("einsum subscripts must be explicit ('...->...')")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ValueError("einsum operand count does not match subscripts")
    values = [value_of(x) for x in operands]
    out = np.einsum(subscripts, *values, optimize=len(values) > 2)
    tape = _tape_of(*operands)
    if tape is None:
        return out

    def make_vjp(k):
        target = in_subs[k]
        shape = np.shape(values[k])

        def vjp(g):
            others = [s for i, s in enumerate(in_subs) if i != k]
            available = set(out_sub).union(*others) if others else set(out_sub)
            kept = "".join(c for c in target if c in available)
            spec = ",".join([out_sub] + others) + "->" + kept
            args = [g] + [v for i, v in enumerate(values) if i != k]
            res = np.einsum(spec, *args, optimize=len(args) > 2)
            if kept != target:
                for pos, c in enumerate(target):
                    if c not in available:
                        res = np.expand_dims(res, pos)
                res = np.broadcast_to(res, shape)
            return res

        return vjp

    parents = [x for x in operands if isinstance(x, Var)]
    vjps = [make_vjp(k) for k, x in enumerate(operands) if isinstance(x, Var)]
    return tape._record(out, parents, vjps)
