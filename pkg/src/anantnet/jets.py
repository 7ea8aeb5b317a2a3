"""Order-2 Taylor jets along one input coordinate, plus gradient utilities.

A :class:`Jet2` carries ``(value, d/dx, d2/dx2)`` for a single seeded input
coordinate.  Components may be numpy arrays or recorded :class:`Var`
values, so jets propagated on a tape can themselves be differentiated with
respect to the network parameters.  ``None`` stands for an identically zero
derivative and lets the first layer skip work.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

__all__ = [
    "Jet2",
    "Tape",
    "jet_tanh",
    "jet_sin",
    "jet_sigmoid",
    "jet_silu",
    "jet_scale",
    "body_jet",
    "value_and_grad",
    "loss_gradient",
    "fd_check",
]


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _mul(a, b):
    if a is None or b is None:
        return None
    return a * b


@dataclass
class Jet2:
    v: Any
    d1: Any = None
    d2: Any = None

    @classmethod
    def seed(cls, x) -> "Jet2":
        """Jet of the independent variable itself: ``(x, 1, 0)``."""
        return cls(x, np.ones_like(ad.value_of(x)), None)

    @classmethod
    def constant(cls, c) -> "Jet2":
        return cls(c, None, None)

    def _coerce(self, other) -> "Jet2":
        return other if isinstance(other, Jet2) else Jet2(other)

    def __add__(self, other):
        o = self._coerce(other)
        return Jet2(self.v + o.v, _add(self.d1, o.d1), _add(self.d2, o.d2))

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.v, None if self.d1 is None else -self.d1, None if self.d2 is None else -self.d2)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        o = self._coerce(other)
        v = self.v * o.v
        d1 = _add(_mul(self.d1, o.v), _mul(self.v, o.d1))
        cross = _mul(self.d1, o.d1)
        d2 = _add(_add(_mul(self.d2, o.v), None if cross is None else 2.0 * cross), _mul(self.v, o.d2))
        return Jet2(v, d1, d2)

    __rmul__ = __mul__

    def compose(self, f, df, d2f) -> "Jet2":
        """Chain rule given ``sigma``, ``sigma'``, ``sigma''`` evaluated at ``self.v``."""
        d1 = _mul(df, self.d1)
        sq = _mul(self.d1, self.d1)
        d2 = _add(_mul(d2f, sq), _mul(df, self.d2))
        return Jet2(f, d1, d2)

    def apply(self, fn: Callable) -> "Jet2":
        """Apply a linear map (matmul, reshape, contraction) to every component."""
        return Jet2(fn(self.v), None if self.d1 is None else fn(self.d1), None if self.d2 is None else fn(self.d2))

    def values(self):
        """Components as plain numpy arrays, zeros filled in."""
        v = np.asarray(ad.value_of(self.v), dtype=np.float64)
        d1 = np.zeros_like(v) if self.d1 is None else np.broadcast_to(ad.value_of(self.d1), v.shape).copy()
        d2 = np.zeros_like(v) if self.d2 is None else np.broadcast_to(ad.value_of(self.d2), v.shape).copy()
        return v, d1, d2


def jet_scale(j: Jet2, c) -> Jet2:
    return Jet2(j.v * c, _mul(j.d1, c), _mul(j.d2, c))


def jet_tanh(j: Jet2) -> Jet2:
    t = ad.tanh(j.v)
    dt = 1.0 - t * t
    return j.compose(t, dt, -2.0 * t * dt)


def jet_sin(j: Jet2) -> Jet2:
    s = ad.sin(j.v)
    return j.compose(s, ad.cos(j.v), -s)


def jet_sigmoid(j: Jet2) -> Jet2:
    s = ad.sigmoid(j.v)
    ds = s * (1.0 - s)
    return j.compose(s, ds, ds * (1.0 - 2.0 * s))


def jet_silu(j: Jet2) -> Jet2:
    s = ad.sigmoid(j.v)
    ds = s * (1.0 - s)
    f = j.v * s
    df = s + j.v * ds
    d2f = ds * (2.0 + j.v * (1.0 - 2.0 * s))
    return j.compose(f, df, d2f)


def body_jet(params, spec, point, coord: int):
    """Value, first and second derivative of one body network at one point.

    Returns three ``r``-vectors; derivatives are taken with respect to input
    coordinate ``coord`` of the network.
    """
    from .bodynet import network_jet

    point = np.asarray(point, dtype=np.float64).reshape(1, -1)
    v, d1, d2 = network_jet(params, spec, point, coord).values()
    return v[0], d1[0], d2[0]


def value_and_grad(fn: Callable, params: np.ndarray) -> tuple[float, np.ndarray]:
    """Evaluate scalar ``fn(theta)`` on a fresh tape and return its gradient."""
    tape = Tape()
    theta = tape.leaf(np.asarray(params, dtype=np.float64))
    out = fn(theta)
    if not isinstance(out, Var):
        # no dependence on theta
        return float(np.asarray(out).reshape(())), np.zeros_like(theta.value)
    (grad,) = loss_gradient(tape, out, [theta])
    return float(np.asarray(out.value).reshape(())), grad


def loss_gradient(tape: Tape, loss: Var, wrt: Sequence[Var], seed: float = 1.0) -> list[np.ndarray]:
    """Replay ``tape`` backwards from the scalar ``loss``."""
    return tape.gradient(loss, wrt, seed=seed)


def fd_check(fn: Callable, params: np.ndarray, indices, h: float = 1e-5):
    """Central differences of ``fn`` at the given parameter indices.

    Returns an ``(len(indices), 3)`` array of ``(analytic, numeric, rel_err)``.
    ``fn`` must accept either a numpy vector or a recorded var.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = np.asarray(params, dtype=np.float64)
    _, grad = value_and_grad(fn, params)
    rows = []
    for i in indices:
        tp = params.copy()
        tp[i] += h
        fp = float(fn(tp))
        tp[i] -= 2 * h
        fm = float(fn(tp))
        numeric = (fp - fm) / (2 * h)
        analytic = grad[i]
        scale = max(abs(analytic), abs(numeric))
        rel = 0.0 if scale == 0 else abs(analytic - numeric) / scale
        rows.append((analytic, numeric, rel))
    return np.array(rows, dtype=np.float64).reshape(-1, 3)
