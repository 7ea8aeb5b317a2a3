"""Dimension partitioning, active-dimension sweeps and tensor-grid sampling.

A grid varies exactly one coordinate per body network (its active
coordinate) along its own axis; every other coordinate is pinned to one
value for the whole grid.  ``B`` axes of ``n`` values represent ``n**B``
points while storing only ``B*n`` numbers plus the pinned values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

KINDS = ("collocation", "boundary", "initial")


def partition_dimensions(d: int, B: int, time_dim: int | None = None) -> list[list[int]]:
    """Split coordinates ``0..d-1`` into ``B`` contiguous ascending blocks.

    With ``time_dim`` set, that coordinate forms the first (singleton) block
    and the remaining ``d - 1`` coordinates are split over ``B - 1`` blocks.
    Block sizes differ by at most one; larger blocks come first.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    if time_dim is None:
        dims = list(range(d))
        n_sets = B
        head = []
    else:
        if not 0 <= time_dim < d:
            raise ValueError("time_dim must be one of the coordinates")
        dims = [k for k in range(d) if k != time_dim]
        n_sets = B - 1
        head = [[time_dim]]
    if n_sets > len(dims):
        raise ValueError(f"cannot split {len(dims)} coordinates into {n_sets} non-empty sets")
    q, rem = divmod(len(dims), n_sets)
    sets, pos = [], 0
    for i in range(n_sets):
        size = q + (1 if i < rem else 0)
        sets.append(dims[pos : pos + size])
        pos += size
    return head + sets


def sweep_active(partition: Sequence[Sequence[int]], seed, return_padding: bool = False):
    """One epoch of active-dimension tuples.

    Each partition set is randomly permuted; tuple ``k`` takes the ``k``-th
    entry of every permutation, so within the epoch every coordinate is
    active exactly once.  Shorter sets are padded by re-drawing already used
    coordinates (flagged when ``return_padding``).  Singleton sets (a time
    network) stay active in every tuple.
    """
    rng = np.random.default_rng(seed)
    sizes = [len(s) for s in partition]
    non_singleton = [n for n in sizes if n > 1]
    length = max(non_singleton) if non_singleton else 1
    columns, pads = [], []
    for s in partition:
        perm = list(rng.permutation(np.asarray(s)))
        pad = [False] * len(perm)
        if len(perm) < length:
            extra = length - len(perm)
            fill = rng.choice(np.asarray(s), size=extra, replace=extra > len(s))
            # singleton sets repeat by design, not as padding
            flag = len(s) > 1
            perm += list(fill)
            pad += [flag] * extra
        columns.append([int(v) for v in perm])
        pads.append(pad)
    tuples = [tuple(col[k] for col in columns) for k in range(length)]
    if return_padding:
        padding = [tuple(p[k] for p in pads) for k in range(length)]
        return tuples, padding
    return tuples


@dataclass(frozen=True)
class SamplerConfig:
    bounds: np.ndarray
    B: int
    n_c: int = 14
    num_collocation_grids: int = 14
    n_b: int = 6
    num_boundary_grids: int = 32
    num_initial_grids: int = 0
    seed: int = 0
    axis_mode: str = "random"
    time_dim: int | None = None

    def __post_init__(self):
        b = np.asarray(self.bounds, dtype=np.float64)
        if b.ndim != 2 or b.shape[1] != 2 or np.any(b[:, 1] <= b[:, 0]):
            raise ValueError("bounds must be an (n, 2) array of increasing intervals")
        object.__setattr__(self, "bounds", b)
        if self.n_c < 2 or self.n_b < 2:
            raise ValueError("grid resolutions N_C and N_B must be >= 2")
        if self.num_collocation_grids < 1 or self.num_boundary_grids < 1:
            raise ValueError("need at least one collocation and one boundary grid")
        if self.num_initial_grids < 0:
            raise ValueError("num_initial_grids must be >= 0")
        if self.axis_mode not in ("random", "equispaced"):
            raise ValueError(f"unknown axis_mode {self.axis_mode!r}")
        if self.B > self.d:
            raise ValueError("B must not exceed the number of coordinates")

    @property
    def d(self) -> int:
        return self.bounds.shape[0]

    @property
    def spatial_dims(self) -> list[int]:
        return [k for k in range(self.d) if k != self.time_dim]

    def total_collocation_points(self) -> int:
        return self.num_collocation_grids * self.n_c**self.B

    def total_boundary_points(self) -> int:
        return self.num_boundary_grids * self.n_b**self.B

    def total_initial_points(self) -> int:
        return self.num_initial_grids * self.n_b**self.B


@dataclass
class GridBatch:
    active_dims: tuple
    axis_coords: list
    inactive_dims: tuple
    inactive_values: np.ndarray
    kind: str = "collocation"
    boundary_face: tuple | None = None
    padded: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        self.axis_coords = [np.asarray(a, dtype=np.float64) for a in self.axis_coords]
        self.inactive_values = np.asarray(self.inactive_values, dtype=np.float64)
        if len(self.axis_coords) != len(self.active_dims):
            raise ValueError("one coordinate axis per active dimension is required")
        if len(self.inactive_values) != len(self.inactive_dims):
            raise ValueError("inactive_values must match inactive_dims")

    @property
    def d(self) -> int:
        return len(self.active_dims) + len(self.inactive_dims)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axis_coords)

    @property
    def n_points(self) -> int:
        return int(np.prod(self.shape))

    def template(self) -> np.ndarray:
        """Full coordinate vector with pinned values; active slots hold NaN."""
        x = np.full(self.d, np.nan)
        x[list(self.inactive_dims)] = self.inactive_values
        return x

    def points(self) -> np.ndarray:
        """Explicit ``n_points x d`` matrix in C order of the grid axes."""
        mesh = np.meshgrid(*self.axis_coords, indexing="ij")
        pts = np.tile(self.template(), (self.n_points, 1))
        for dim, m in zip(self.active_dims, mesh):
            pts[:, dim] = m.reshape(-1)
        return pts


def _interior(rng, lo, hi, size):
    out = rng.uniform(lo, hi, size=size)
    bad = out <= lo
    while np.any(bad):
        out[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
        bad = out <= lo
    return out


def _pinned(cfg: SamplerConfig, dims, rng) -> np.ndarray:
    if not dims:
        return np.empty(0)
    b = cfg.bounds[list(dims)]
    return _interior(rng, 0.0, 1.0, len(dims)) * (b[:, 1] - b[:, 0]) + b[:, 0]


def _axis(cfg: SamplerConfig, dim: int, n: int, rng) -> np.ndarray:
    lo, hi = cfg.bounds[dim]
    if cfg.axis_mode == "equispaced":
        return np.linspace(lo, hi, n + 2)[1:-1]
    return _interior(rng, lo, hi, n)


def _check_active(cfg: SamplerConfig, active_dims) -> tuple:
    active = tuple(int(a) for a in active_dims)
    if len(active) != cfg.B or len(set(active)) != cfg.B:
        raise ValueError(f"need {cfg.B} distinct active dimensions, got {active}")
    if any(not 0 <= a < cfg.d for a in active):
        raise ValueError("active dimension out of range")
    return active


def _inactive(cfg: SamplerConfig, active) -> tuple:
    s = set(active)
    return tuple(k for k in range(cfg.d) if k not in s)


def make_collocation_grid(cfg: SamplerConfig, active_dims, rng) -> GridBatch:
    active = _check_active(cfg, active_dims)
    inactive = _inactive(cfg, active)
    axes = [_axis(cfg, a, cfg.n_c, rng) for a in active]
    vals = _pinned(cfg, inactive, rng)
    return GridBatch(active, axes, inactive, vals, "collocation")


def make_boundary_grid(cfg: SamplerConfig, active_dims, rng) -> GridBatch:
    """Grid on one box face: a random inactive spatial coordinate is pinned to ``lo`` or ``hi``."""
    active = _check_active(cfg, active_dims)
    inactive = _inactive(cfg, active)
    hosts = [k for k in inactive if k != cfg.time_dim]
    if not hosts:
        raise ValueError("boundary grids need at least one inactive spatial dimension (d > B)")
    axes = [_axis(cfg, a, cfg.n_b, rng) for a in active]
    face = int(hosts[rng.integers(len(hosts))])
    sign = 1 if rng.integers(2) else -1
    vals = _pinned(cfg, inactive, rng)
    lo, hi = cfg.bounds[face]
    vals[inactive.index(face)] = hi if sign > 0 else lo
    return GridBatch(active, axes, inactive, vals, "boundary", (face, sign))


def make_initial_grid(cfg: SamplerConfig, active_dims, rng) -> GridBatch:
    """Grid at ``t = 0``; the time axis holds ``N_B`` copies of 0."""
    if cfg.time_dim is None:
        raise ValueError("initial grids exist only for transient problems")
    active = _check_active(cfg, active_dims)
    if cfg.time_dim not in active:
        raise ValueError("the time coordinate must be active for initial grids")
    inactive = _inactive(cfg, active)
    axes = [np.zeros(cfg.n_b) if a == cfg.time_dim else _axis(cfg, a, cfg.n_b, rng) for a in active]
    vals = _pinned(cfg, inactive, rng)
    return GridBatch(active, axes, inactive, vals, "initial")


def sample_test_points(d: int, n: int, box, seed) -> np.ndarray:
    """``n`` i.i.d. uniform points in the open box (scattered, no grid structure).

    ``box`` is either one ``(lo, hi)`` pair for every coordinate or a
    ``(d, 2)`` array of per-coordinate bounds.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    b = np.asarray(box, dtype=np.float64)
    if b.ndim == 1:
        b = np.tile(b, (d, 1))
    if b.shape != (d, 2):
        raise ValueError(f"box must be a pair or a ({d}, 2) array")
    rng = np.random.default_rng(seed)
    return _interior(rng, 0.0, 1.0, (n, d)) * (b[:, 1] - b[:, 0]) + b[:, 0]
