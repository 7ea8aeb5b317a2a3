"""Body networks: MLP and KAN maps from an input slice to an embedding.

Parameters of a network live in one flat vector.  ``layout(spec)`` gives the
named, shaped ranges inside that vector; forward functions slice it, so the
same code runs on numpy vectors and on recorded vars.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from math import comb
from typing import Union

import numpy as np
from numpy.polynomial import chebyshev as npcheb

from . import autodiff as ad
from .jets import Jet2, jet_scale, jet_silu, jet_sin, jet_tanh

ACTIVATIONS = ("tanh", "sin", "identity")
BASES = ("spline", "chebyshev", "chebyshev_modified", "fourier")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple = (64, 64)
    embedding_dim: int = 10
    activation: str = "tanh"
    adaptive: bool = False
    scale_n: float = 1.0

    kind = "mlp"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1:
            raise SpecError("input_dim must be >= 1")
        if self.embedding_dim < 1:
            raise SpecError("embedding_dim must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if any(w < 1 for w in self.hidden_widths):
            raise SpecError("hidden widths must be positive")
        if not self.hidden_widths and self.activation != "identity":
            raise SpecError("hidden_widths may be empty only with identity activation")
        if self.scale_n <= 0:
            raise SpecError("scale_n must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "embedding_dim": self.embedding_dim,
            "activation": self.activation,
            "adaptive": self.adaptive,
            "scale_n": self.scale_n,
        }


@dataclass(frozen=True)
class KanSpec:
    input_dim: int
    layer_widths: tuple = (5, 5)
    embedding_dim: int = 10
    basis: str = "spline"
    order: int = 2
    grid_size: int = 5
    grid_range: tuple = (-1.5, 1.5)
    strict: bool = False

    kind = "kan"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "grid_range", tuple(float(x) for x in self.grid_range))
        if self.input_dim < 1 or self.embedding_dim < 1:
            raise SpecError("input_dim and embedding_dim must be >= 1")
        if any(w < 1 for w in self.layer_widths):
            raise SpecError("layer widths must be positive")
        if self.basis not in BASES:
            raise SpecError(f"unknown basis {self.basis!r}")
        if self.basis == "spline":
            if self.grid_size < 1 or self.order < 0:
                raise SpecError("spline basis needs grid_size >= 1 and order >= 0")
            lo, hi = self.grid_range
            if not hi > lo:
                raise SpecError("grid_range must be increasing")
        elif self.order < 1:
            raise SpecError(f"{self.basis} basis needs order >= 1")

    @property
    def n_basis(self) -> int:
        if self.basis == "spline":
            return self.grid_size + self.order
        if self.basis == "fourier":
            return 2 * self.order
        return self.order + 1

    def to_dict(self) -> dict:
        return {
            "kind": "kan",
            "input_dim": self.input_dim,
            "layer_widths": list(self.layer_widths),
            "embedding_dim": self.embedding_dim,
            "basis": self.basis,
            "order": self.order,
            "grid_size": self.grid_size,
            "grid_range": list(self.grid_range),
            "strict": self.strict,
        }


BodySpec = Union[MlpSpec, KanSpec]


def spec_from_dict(d: dict) -> BodySpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "mlp":
        return MlpSpec(**d)
    if kind == "kan":
        return KanSpec(**d)
    raise SpecError(f"unknown body network kind {kind!r}")


# ---------------------------------------------------------------------------
# parameter layout


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    start: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def stop(self) -> int:
        return self.start + self.size


@dataclass(frozen=True)
class ParamLayout:
    entries: tuple

    @property
    def size(self) -> int:
        return self.entries[-1].stop if self.entries else 0

    def __getitem__(self, name: str) -> LayoutEntry:
        return self._index[name]

    @functools.cached_property
    def _index(self) -> dict:
        return {e.name: e for e in self.entries}

    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def take(self, theta, name: str):
        e = self[name]
        return theta[e.start : e.stop].reshape(e.shape)

    @classmethod
    def from_shapes(cls, items) -> "ParamLayout":
        entries, pos = [], 0
        for name, shape in items:
            e = LayoutEntry(name, tuple(int(s) for s in shape), pos)
            entries.append(e)
            pos = e.stop
        return cls(tuple(entries))


@dataclass
class ParamVector:
    values: np.ndarray
    layout: ParamLayout = field(repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise SpecError(f"parameter vector has shape {self.values.shape}, layout needs ({self.layout.size},)")

    def unpack(self) -> dict:
        return {e.name: self.values[e.start : e.stop].reshape(e.shape) for e in self.layout.entries}

    @classmethod
    def pack(cls, tensors: dict, layout: ParamLayout) -> "ParamVector":
        values = np.empty(layout.size)
        for e in layout.entries:
            values[e.start : e.stop] = np.asarray(tensors[e.name], dtype=np.float64).reshape(-1)
        return cls(values, layout)


def _mlp_dims(spec: MlpSpec) -> list[int]:
    return [spec.input_dim, *spec.hidden_widths, spec.embedding_dim]


def _kan_dims(spec: KanSpec) -> list[int]:
    return [spec.input_dim, *spec.layer_widths, spec.embedding_dim]


@functools.lru_cache(maxsize=None)
def layout(spec: BodySpec) -> ParamLayout:
    items = []
    if isinstance(spec, MlpSpec):
        dims = _mlp_dims(spec)
        n_layers = len(dims) - 1
        for l in range(n_layers):
            items.append((f"W{l + 1}", (dims[l], dims[l + 1])))
            items.append((f"b{l + 1}", (dims[l + 1],)))
            if spec.adaptive and l < n_layers - 1:
                items.append((f"a{l + 1}", ()))
    else:
        dims = _kan_dims(spec)
        m = spec.n_basis
        for l in range(len(dims) - 1):
            if spec.basis == "spline":
                items.append((f"base{l + 1}", (dims[l], dims[l + 1])))
                items.append((f"scale{l + 1}", (dims[l], dims[l + 1])))
            items.append((f"coef{l + 1}", (dims[l], m, dims[l + 1])))
    return ParamLayout.from_shapes(items)


def param_count(spec: BodySpec) -> int:
    return layout(spec).size


def _xavier(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_mlp(spec: MlpSpec, seed: int) -> ParamVector:
    """Xavier-uniform weights, zero biases, unit adaptive slopes."""
    rng = np.random.default_rng(seed)
    lay = layout(spec)
    tensors = {}
    for e in lay.entries:
        if e.name.startswith("W"):
            tensors[e.name] = _xavier(rng, e.shape[0], e.shape[1], e.shape)
        elif e.name.startswith("b"):
            tensors[e.name] = np.zeros(e.shape)
        else:
            tensors[e.name] = np.ones(e.shape)
    return ParamVector.pack(tensors, lay)


def init_kan(spec: KanSpec, seed: int) -> ParamVector:
    rng = np.random.default_rng(seed)
    lay = layout(spec)
    tensors = {}
    m = spec.n_basis
    for e in lay.entries:
        if e.name.startswith("base"):
            tensors[e.name] = _xavier(rng, e.shape[0], e.shape[1], e.shape)
        elif e.name.startswith("scale"):
            tensors[e.name] = np.ones(e.shape)
        else:
            n_in, _, n_out = e.shape
            tensors[e.name] = _xavier(rng, n_in * m, n_out, e.shape)
    return ParamVector.pack(tensors, lay)


def init_params(spec: BodySpec, seed: int) -> ParamVector:
    return init_mlp(spec, seed) if isinstance(spec, MlpSpec) else init_kan(spec, seed)


# ---------------------------------------------------------------------------
# MLP


def _check_input(X, spec) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise SpecError(f"expected input of shape (n, {spec.input_dim}), got {X.shape}")
    return X


def _check_params(params, spec):
    if np.shape(ad.value_of(params)) != (param_count(spec),):
        raise SpecError(f"parameter vector of length {param_count(spec)} expected, got {np.shape(ad.value_of(params))}")


def _mlp_layers(params, spec: MlpSpec):
    lay = layout(spec)
    n_layers = len(spec.hidden_widths) + 1
    for l in range(1, n_layers + 1):
        W = lay.take(params, f"W{l}")
        b = lay.take(params, f"b{l}")
        slope = None
        if l < n_layers:
            if spec.adaptive:
                slope = lay.take(params, f"a{l}")
                if spec.scale_n != 1.0:
                    slope = slope * spec.scale_n
            elif spec.scale_n != 1.0:
                slope = spec.scale_n
        yield W, b, slope, l == n_layers


def _activate(z, kind):
    if kind == "tanh":
        return ad.tanh(z)
    if kind == "sin":
        return ad.sin(z)
    return z


def _jet_activate(j: Jet2, kind) -> Jet2:
    if kind == "tanh":
        return jet_tanh(j)
    if kind == "sin":
        return jet_sin(j)
    return j


def mlp_forward(params, spec: MlpSpec, X):
    """Embedding of each row of ``X``; the last layer is affine."""
    X = _check_input(X, spec)
    _check_params(params, spec)
    h = X
    for W, b, slope, last in _mlp_layers(params, spec):
        z = h @ W + b
        if last:
            return z
        if slope is not None:
            z = z * slope
        h = _activate(z, spec.activation)
    raise AssertionError("unreachable")


def mlp_jet(params, spec: MlpSpec, X, coord: int) -> Jet2:
    X = _check_input(X, spec)
    _check_params(params, spec)
    h = None
    for i, (W, b, slope, last) in enumerate(_mlp_layers(params, spec)):
        if i == 0:
            # seed (x, e_coord, 0): first-layer derivative is the weight row
            z = Jet2(X @ W + b, W[coord], None)
        else:
            z = h.apply(lambda a: a @ W)
            z = Jet2(z.v + b, z.d1, z.d2)
        if last:
            return z
        if slope is not None:
            z = jet_scale(z, slope)
        h = _jet_activate(z, spec.activation)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# KAN bases


def spline_knots(spec: KanSpec) -> np.ndarray:
    lo, hi = spec.grid_range
    h = (hi - lo) / spec.grid_size
    return lo + h * np.arange(-spec.order, spec.grid_size + spec.order + 1)


def bspline_basis(x, grid_size: int, order: int, grid_range=(-1.5, 1.5), deriv: int = 0) -> np.ndarray:
    """Uniform B-spline basis of ``order`` (degree) on ``grid_size`` intervals.

    Returns shape ``x.shape + (grid_size + order,)``.  ``deriv`` selects the
    derivative order; derivatives above ``order`` vanish.  Inputs are assumed
    inside ``grid_range``; the right end belongs to the last interval.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = grid_range
    h = (hi - lo) / grid_size
    n_out = grid_size + order
    if deriv > order:
        return np.zeros(x.shape + (n_out,))
    p = order - deriv
    # Cox-de Boor on knots lo + h*(j - order), j = 0..grid_size+2*order
    knots = lo + h * np.arange(-order, grid_size + order + 1)
    n0 = len(knots) - 1
    cell = np.floor((x - lo) / h).astype(np.int64) + order
    cell = np.clip(cell, order, grid_size + order - 1)
    B = np.zeros(x.shape + (n0,))
    np.put_along_axis(B, cell[..., None], 1.0, axis=-1)
    xe = x[..., None]
    for q in range(1, p + 1):
        left = (xe - knots[: n0 - q]) / (q * h)
        right = (knots[q + 1 : n0 + 1] - xe) / (q * h)
        B = left * B[..., :-1] + right * B[..., 1:]
    # B now has n0 - p functions of degree p
    if deriv == 0:
        return B
    out = np.zeros(x.shape + (n_out,))
    for j in range(deriv + 1):
        out += (-1) ** j * comb(deriv, j) * B[..., j : j + n_out]
    return out / h**deriv


@functools.lru_cache(maxsize=None)
def _cheb_deriv_matrix(order: int, deriv: int) -> np.ndarray:
    """Matrix mapping T_n values to coefficients of T_n^(deriv) in the T basis."""
    n = order + 1
    D = np.zeros((n, n))
    for k in range(n):
        c = np.zeros(n)
        c[k] = 1.0
        dc = npcheb.chebder(c, deriv) if deriv else c
        D[: len(dc), k] = dc
    return D


def chebyshev_basis(x, order: int, deriv: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    T = np.empty(x.shape + (order + 1,))
    T[..., 0] = 1.0
    if order >= 1:
        T[..., 1] = x
    for n in range(2, order + 1):
        T[..., n] = 2.0 * x * T[..., n - 1] - T[..., n - 2]
    if deriv == 0:
        return T
    if deriv > order:
        return np.zeros_like(T)
    return T @ _cheb_deriv_matrix(order, deriv)


def fourier_basis(x, order: int, deriv: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = np.arange(1, order + 1, dtype=np.float64)
    phase = x[..., None] * k + deriv * np.pi / 2
    scale = k**deriv
    return np.concatenate([scale * np.cos(phase), scale * np.sin(phase)], axis=-1)


def _basis_numpy(spec: KanSpec, x, deriv: int) -> np.ndarray:
    if spec.basis == "spline":
        return bspline_basis(x, spec.grid_size, spec.order, spec.grid_range, deriv)
    if spec.basis == "fourier":
        return fourier_basis(x, spec.order, deriv)
    return chebyshev_basis(x, spec.order, deriv)


def basis(spec: KanSpec, x, deriv: int = 0):
    """Basis values (or derivatives) at ``x``; differentiable in ``x``."""
    xv = ad.value_of(x)
    out = _basis_numpy(spec, xv, deriv)
    if not ad.is_var(x):
        return out
    return ad.custom(out, (x, lambda g: (g * _basis_numpy(spec, xv, deriv + 1)).sum(axis=-1)))


# ---------------------------------------------------------------------------
# KAN


def _kan_layers(params, spec: KanSpec):
    lay = layout(spec)
    n_layers = len(spec.layer_widths) + 1
    for l in range(1, n_layers + 1):
        coef = lay.take(params, f"coef{l}")
        if spec.basis == "spline":
            scale = lay.take(params, f"scale{l}")
            coef = coef * ad.reshape(scale, (scale.shape[0], 1, scale.shape[1]))
            base = lay.take(params, f"base{l}")
        else:
            base = None
        n_in = coef.shape[0]
        coef = ad.reshape(coef, (n_in * spec.n_basis, coef.shape[2]))
        yield coef, base, l == 1, l == n_layers


def _normalize_tanh(spec: KanSpec, first: bool) -> bool:
    if spec.basis == "chebyshev":
        return first
    return spec.basis == "chebyshev_modified"


def _spline_support(spec: KanSpec, x):
    lo, hi = spec.grid_range
    xv = ad.value_of(x)
    outside = (xv < lo) | (xv > hi)
    if spec.strict and np.any(outside):
        raise SpecError(f"KAN input outside spline support [{lo}, {hi}]")
    return lo, hi


def kan_forward(params, spec: KanSpec, X):
    """KAN embedding: each layer sums its edge functions into the next layer."""
    X = _check_input(X, spec)
    _check_params(params, spec)
    h = X
    for coef, base, first, last in _kan_layers(params, spec):
        x = ad.tanh(h) if _normalize_tanh(spec, first) else h
        if spec.basis == "spline":
            lo, hi = _spline_support(spec, x)
            xc = ad.clip(x, lo, hi)
        else:
            xc = x
        n = np.shape(ad.value_of(x))[0]
        B = ad.reshape(basis(spec, xc, 0), (n, -1))
        y = B @ coef
        if base is not None:
            y = y + (x * ad.sigmoid(x)) @ base
        h = y
    return h


def kan_jet(params, spec: KanSpec, X, coord: int) -> Jet2:
    X = _check_input(X, spec)
    _check_params(params, spec)
    d1 = np.zeros((1, spec.input_dim))
    d1[0, coord] = 1.0
    h = Jet2(X, d1, None)
    for coef, base, first, last in _kan_layers(params, spec):
        x = jet_tanh(h) if _normalize_tanh(spec, first) else h
        if spec.basis == "spline":
            lo, hi = _spline_support(spec, x.v)
            mask = ((ad.value_of(x.v) >= lo) & (ad.value_of(x.v) <= hi)).astype(np.float64)
            xc = Jet2(ad.clip(x.v, lo, hi), None if x.d1 is None else x.d1 * mask, None if x.d2 is None else x.d2 * mask)
        else:
            xc = x
        B0 = basis(spec, xc.v, 0)
        B1 = basis(spec, xc.v, 1)
        B2 = basis(spec, xc.v, 2)
        m = spec.n_basis
        n_in = np.shape(ad.value_of(xc.v))[1]

        def expand(a):
            return ad.reshape(a, (np.shape(ad.value_of(a))[0], n_in, 1))

        bd1 = None if xc.d1 is None else B1 * expand(xc.d1)
        sq = None if xc.d1 is None else xc.d1 * xc.d1
        bd2 = None
        if sq is not None:
            bd2 = B2 * expand(sq)
        if xc.d2 is not None:
            t = B1 * expand(xc.d2)
            bd2 = t if bd2 is None else bd2 + t
        flat = lambda a: ad.reshape(a, (-1, n_in * m))  # noqa: E731
        y = Jet2(flat(B0) @ coef, None if bd1 is None else flat(bd1) @ coef, None if bd2 is None else flat(bd2) @ coef)
        if base is not None:
            s = jet_silu(x).apply(lambda a: a @ base)
            y = y + s
        h = y
    return h


# ---------------------------------------------------------------------------
# dispatch


def network_forward(params, spec: BodySpec, X):
    if isinstance(spec, MlpSpec):
        return mlp_forward(params, spec, X)
    return kan_forward(params, spec, X)


def network_jet(params, spec: BodySpec, X, coord: int) -> Jet2:
    """Jet of the network output along input coordinate ``coord``."""
    if not 0 <= coord < spec.input_dim:
        raise SpecError(f"coordinate {coord} out of range for input_dim {spec.input_dim}")
    if isinstance(spec, MlpSpec):
        return mlp_jet(params, spec, X, coord)
    return kan_jet(params, spec, X, coord)
