"""Separable tensor-product prediction from B body networks.

The prediction at a point is ``sum_j prod_i F_i[j]`` where ``F_i`` is the
embedding of body network ``i`` evaluated on its own coordinate block.  On a
tensor grid each network is evaluated once per axis value and the products
are formed by a single contraction; scattered points evaluate every network
on every point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .bodynet import (
    BodySpec,
    ParamLayout,
    ParamVector,
    init_params,
    layout,
    network_forward,
    network_jet,
)
from .sampling import GridBatch

@dataclass
class AnantModel:
    specs: tuple
    params: ParamVector
    partition: tuple
    time_network: int | None = None

    def __post_init__(self):
        self.specs = tuple(self.specs)
        self.partition = tuple(tuple(int(k) for k in s) for s in self.partition)
        if len(self.specs) != len(self.partition):
            raise ValueError("one partition set per body network is required")
        if len(self.specs) < 2:
            raise ValueError("an Anant-Net needs at least two body networks")
        flat = [k for s in self.partition for k in s]
        if sorted(flat) != list(range(len(flat))):
            raise ValueError("partition sets must be disjoint and cover 0..d-1")
        for s, spec in zip(self.partition, self.specs):
            if list(s) != sorted(s) or not s:
                raise ValueError("partition sets must be non-empty and ascending")
            if spec.input_dim != len(s):
                raise ValueError(f"body network input_dim {spec.input_dim} does not match its {len(s)} coordinates")
        if len({s.embedding_dim for s in self.specs}) != 1:
            raise ValueError("all body networks must share the embedding dimension")
        if self.time_network is not None and len(self.partition[self.time_network]) != 1:
            raise ValueError("the time network must own exactly one coordinate")
        if self.params.layout != model_layout(self.specs):
            raise ValueError("parameter layout does not match the body network specs")

    @property
    def B(self) -> int:
        return len(self.specs)

    @property
    def d(self) -> int:
        return sum(len(s) for s in self.partition)

    @property
    def r(self) -> int:
        return self.specs[0].embedding_dim

    @property
    def offsets(self) -> list[tuple[int, int]]:
        out, pos = [], 0
        for spec in self.specs:
            n = layout(spec).size
            out.append((pos, pos + n))
            pos += n
        return out

    def owner(self, coord: int) -> tuple[int, int]:
        """(network index, local input index) owning global coordinate ``coord``."""
        for i, s in enumerate(self.partition):
            if coord in s:
                return i, s.index(coord)
        raise ValueError(f"coordinate {coord} is not in the partition")

    def network_params(self, theta, i: int):
        a, b = self.offsets[i]
        return theta[a:b]

    def with_params(self, values: np.ndarray) -> "AnantModel":
        return AnantModel(self.specs, ParamVector(np.array(values, dtype=np.float64), self.params.layout), self.partition, self.time_network)


def model_layout(specs: Sequence[BodySpec]) -> ParamLayout:
    items = []
    for i, spec in enumerate(specs):
        items += [(f"net{i}.{e.name}", e.shape) for e in layout(spec).entries]
    return ParamLayout.from_shapes(items)


def build_model(specs: Sequence[BodySpec], partition, seed: int, time_network: int | None = None) -> AnantModel:
    """Fresh model; each body network is initialized from its own child seed."""
    children = np.random.SeedSequence(seed).spawn(len(specs))
    values = [init_params(spec, int(c.generate_state(1)[0])).values for spec, c in zip(specs, children)]
    lay = model_layout(specs)
    return AnantModel(tuple(specs), ParamVector(np.concatenate(values), lay), partition, time_network)


# ---------------------------------------------------------------------------
# grid path


def _khatri_rao(mats):
    """Row-wise outer products: ``(G, n_1 * ... * n_k, r)`` from ``(G, n_i, r)`` factors."""
    P = mats[0]
    for M in mats[1:]:
        G, r = P.shape[0], P.shape[-1]
        P = (P[:, :, None, :] * M[:, None, :, :]).reshape(G, -1, r)
    return P


def contract(factors: Sequence) -> object:
    """``sum_j prod_i F_i[g, a_i, j]`` over a leading stack axis ``g``.

    The first ``B - 1`` factors are combined by a Khatri-Rao product and the
    last one by a batched matmul; the vjp for each factor reuses the same
    pattern with that factor left out.
    """
    vals = [np.asarray(ad.value_of(F), dtype=np.float64) for F in factors]
    if len(vals) < 2:
        raise ValueError("the contraction needs at least two factors")
    G = vals[0].shape[0]
    shape = (G,) + tuple(v.shape[1] for v in vals)
    out = (_khatri_rao(vals[:-1]) @ vals[-1].transpose(0, 2, 1)).reshape(shape)
    if not any(ad.is_var(F) for F in factors):
        return out

    def vjp_for(i):
        def vjp(g):
            others = _khatri_rao(vals[:i] + vals[i + 1 :])
            gi = np.moveaxis(np.asarray(g).reshape(shape), i + 1, 1).reshape(G, shape[i + 1], -1)
            return gi @ others

        return vjp

    return ad.custom(out, *((F, vjp_for(i)) for i, F in enumerate(factors)))


def _check_grids(model: AnantModel, grids: Sequence[GridBatch]) -> tuple:
    if not grids:
        raise ValueError("at least one grid is required")
    active = tuple(grids[0].active_dims)
    shape = grids[0].shape
    for g in grids:
        if tuple(g.active_dims) != active or g.shape != shape:
            raise ValueError("stacked grids must share active dimensions and shape")
        if g.d != model.d:
            raise ValueError(f"grid has {g.d} coordinates, model has {model.d}")
    if len(active) != model.B:
        raise ValueError("grid must have one active dimension per body network")
    for i, a in enumerate(active):
        if a not in model.partition[i]:
            raise ValueError(f"active dimension {a} is not owned by body network {i}")
    return active


def grid_inputs(model: AnantModel, grids: Sequence[GridBatch]) -> list[np.ndarray]:
    """Per-network input matrices of shape ``(G * n_i, input_dim_i)``."""
    active = _check_grids(model, grids)
    templates = np.stack([g.template() for g in grids])
    out = []
    for i, part in enumerate(model.partition):
        local = part.index(active[i])
        n = grids[0].shape[i]
        X = np.repeat(templates[:, list(part)], n, axis=0)
        X[:, local] = np.concatenate([g.axis_coords[i] for g in grids])
        out.append(X)
    return out


def grid_jets(model: AnantModel, theta, grids: Sequence[GridBatch], inputs=None) -> list:
    """Jets of every body network along its active coordinate, shaped ``(G, n_i, r)``."""
    active = _check_grids(model, grids)
    inputs = grid_inputs(model, grids) if inputs is None else inputs
    G = len(grids)
    jets = []
    for i, X in enumerate(inputs):
        local = model.partition[i].index(active[i])
        j = network_jet(model.network_params(theta, i), model.specs[i], X, local)
        n = grids[0].shape[i]
        jets.append(j.apply(lambda a, n=n: _stack(a, G, n, model.r)))
    return jets


def _stack(a, G, n, r):
    if np.shape(ad.value_of(a)) != (G * n, r):
        a = a + np.zeros((G * n, r))
    return ad.reshape(a, (G, n, r))


def grid_values(model: AnantModel, theta, grids: Sequence[GridBatch], inputs=None) -> list:
    """Body-network embeddings on stacked grids, each ``(G, n_i, r)``."""
    _check_grids(model, grids)
    inputs = grid_inputs(model, grids) if inputs is None else inputs
    G = len(grids)
    out = []
    for i, X in enumerate(inputs):
        F = network_forward(model.network_params(theta, i), model.specs[i], X)
        out.append(ad.reshape(F, (G, grids[0].shape[i], model.r)))
    return out


def predict_grid(model: AnantModel, grid: GridBatch, theta=None) -> np.ndarray:
    theta = model.params.values if theta is None else theta
    F = grid_values(model, theta, [grid])
    return ad.value_of(contract(F))[0]


def _derivative_grid(model: AnantModel, grid: GridBatch, active_coord: int, order: int) -> np.ndarray:
    if active_coord not in grid.active_dims:
        raise ValueError(f"coordinate {active_coord} is not active in this grid")
    i = list(grid.active_dims).index(active_coord)
    jets = grid_jets(model, model.params.values, [grid])
    factors = [j.values()[0] for j in jets]
    factors[i] = jets[i].values()[order]
    return contract(factors)[0]


def partial2_grid(model: AnantModel, grid: GridBatch, active_coord: int) -> np.ndarray:
    """Second derivative of the prediction along an active coordinate of ``grid``."""
    return _derivative_grid(model, grid, active_coord, 2)


def partial1_grid(model: AnantModel, grid: GridBatch, active_coord: int) -> np.ndarray:
    return _derivative_grid(model, grid, active_coord, 1)


# ---------------------------------------------------------------------------
# scattered points


def _check_points(model: AnantModel, points) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :]
    if points.ndim != 2 or points.shape[1] != model.d:
        raise ValueError(f"points must have {model.d} columns, got shape {points.shape}")
    return points


def point_embeddings(model: AnantModel, points, theta=None) -> list:
    theta = model.params.values if theta is None else theta
    points = _check_points(model, points)
    return [network_forward(model.network_params(theta, i), spec, points[:, list(part)]) for i, (spec, part) in enumerate(zip(model.specs, model.partition))]


def predict_points(model: AnantModel, points, theta=None):
    """Prediction at scattered points (one row per point)."""
    F = point_embeddings(model, points, theta)
    prod = F[0]
    for f in F[1:]:
        prod = prod * f
    return ad.sum(prod, axis=1)


def _derivative_points(model: AnantModel, points, coord: int, order: int) -> np.ndarray:
    points = _check_points(model, points)
    i, local = model.owner(coord)
    F = point_embeddings(model, points)
    theta = model.params.values
    j = network_jet(model.network_params(theta, i), model.specs[i], points[:, list(model.partition[i])], local)
    F[i] = j.values()[order]
    return np.prod(np.stack(F), axis=0).sum(axis=1)


def partial2_points(model: AnantModel, points, coord: int) -> np.ndarray:
    return _derivative_points(model, points, coord, 2)


def partial1_points(model: AnantModel, points, coord: int) -> np.ndarray:
    return _derivative_points(model, points, coord, 1)
