"""Benchmark problems with manufactured solutions.

Every exact solution depends on the spatial coordinates only through their
mean ``s = (1/d) * sum(x_i)`` (and on ``t`` for the heat equation), so each
spatial coordinate carries the same second derivative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROBLEMS = ("poisson", "sine_gordon", "allen_cahn", "heat")
SCALINGS = ("as_written", "d_over_b")


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    d: int
    box: tuple = (-1.0, 1.0)
    T: float = 1.0

    def __post_init__(self):
        if self.name not in PROBLEMS:
            raise ValueError(f"unknown problem {self.name!r}; expected one of {PROBLEMS}")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        object.__setattr__(self, "box", (float(self.box[0]), float(self.box[1])))
        if not self.box[1] > self.box[0]:
            raise ValueError("box must be an increasing interval")
        if self.T <= 0:
            raise ValueError("T must be positive")

    @property
    def transient(self) -> bool:
        return self.name == "heat"

    @property
    def n_coords(self) -> int:
        """Input coordinates: ``d`` spatial, plus time (last) when transient."""
        return self.d + 1 if self.transient else self.d

    @property
    def time_coord(self) -> int | None:
        return self.d if self.transient else None

    def bounds(self) -> np.ndarray:
        b = np.tile(np.asarray(self.box, dtype=np.float64), (self.n_coords, 1))
        if self.transient:
            b[self.d] = (0.0, self.T)
        return b

    def to_dict(self) -> dict:
        return {"name": self.name, "d": self.d, "box": list(self.box), "T": self.T}


@dataclass(frozen=True)
class ResidualConfig:
    scaling: str = "as_written"

    def __post_init__(self):
        if self.scaling not in SCALINGS:
            raise ValueError(f"unknown residual scaling {self.scaling!r}")

    @property
    def nonlinear_term_once(self) -> bool:
        return True


# ---------------------------------------------------------------------------
# closed forms in terms of (s, t)


def u_of(problem: ProblemSpec, s, t=None):
    if problem.transient:
        return np.cos(s) * np.exp(-t)
    return s * s + np.sin(s)


def d2u_of(problem: ProblemSpec, s, t=None):
    """Second derivative of the exact solution along any single spatial coordinate."""
    d2 = problem.d**2
    if problem.transient:
        return -np.cos(s) * np.exp(-t) / d2
    return (2.0 - np.sin(s)) / d2


def dtu_of(problem: ProblemSpec, s, t):
    return -np.cos(s) * np.exp(-t)


def f_of(problem: ProblemSpec, s, t=None):
    d = problem.d
    if problem.name == "heat":
        return (1.0 / d - 1.0) * np.cos(s) * np.exp(-t)
    base = (np.sin(s) - 2.0) / d
    if problem.name == "poisson":
        return base
    u = u_of(problem, s)
    if problem.name == "sine_gordon":
        return base + np.sin(u)
    return base + u - u**3


def _split(problem: ProblemSpec, x, t):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == problem.n_coords and problem.transient and t is None:
        x, t = x[..., : problem.d], x[..., problem.d]
    if x.shape[-1] != problem.d:
        raise ValueError(f"point must have {problem.d} spatial coordinates, got {x.shape[-1]}")
    if problem.transient and t is None:
        raise ValueError("transient problem needs a time value")
    return x, t


def mean_coordinate(problem: ProblemSpec, x, t=None):
    x, t = _split(problem, x, t)
    return x.mean(axis=-1), t


def exact_solution(problem: ProblemSpec, x, t=None):
    s, t = mean_coordinate(problem, x, t)
    return u_of(problem, s, t)


def forcing(problem: ProblemSpec, x, t=None):
    s, t = mean_coordinate(problem, x, t)
    return f_of(problem, s, t)


def on_boundary(problem: ProblemSpec, x, atol: float = 0.0) -> np.ndarray:
    """True where some spatial coordinate sits on a box face."""
    x, _ = _split(problem, x, 0.0 if problem.transient else None)
    lo, hi = problem.box
    return np.any((np.abs(x - lo) <= atol) | (np.abs(x - hi) <= atol), axis=-1)


def boundary_value(problem: ProblemSpec, x, t=None, strict: bool = False):
    if strict and not np.all(on_boundary(problem, x if t is None else np.asarray(x)[..., : problem.d])):
        raise ValueError("boundary_value called on a point off the boundary")
    return exact_solution(problem, x, t)


def initial_value(problem: ProblemSpec, x):
    if not problem.transient:
        raise ValueError(f"{problem.name} is steady; it has no initial condition")
    x = np.asarray(x, dtype=np.float64)[..., : problem.d]
    return exact_solution(problem, x, np.zeros(x.shape[:-1]))


def residual_scale(problem: ProblemSpec, rcfg: ResidualConfig, B: int) -> float:
    if rcfg.scaling == "as_written":
        return 1.0
    spatial_networks = B - 1 if problem.transient else B
    return problem.d / spatial_networks


def residual(problem: ProblemSpec, rcfg: ResidualConfig, u, second_derivs, f, B: int, first_deriv_time=None):
    """PDE residual from derivatives along the active coordinates only.

    ``second_derivs`` holds one tensor per active spatial coordinate.  Works on
    numpy arrays and recorded vars alike.
    """
    if not second_derivs:
        raise ValueError("at least one second-derivative tensor is required")
    lap = second_derivs[0]
    for t in second_derivs[1:]:
        lap = lap + t
    scale = residual_scale(problem, rcfg, B)
    if scale != 1.0:
        lap = lap * scale
    if problem.name == "poisson":
        return -lap - f
    if problem.name == "sine_gordon":
        from . import autodiff as ad

        return -lap + ad.sin(u) - f
    if problem.name == "allen_cahn":
        return -lap + u - u * u * u - f
    if first_deriv_time is None:
        raise ValueError("heat residual needs the time derivative")
    return first_deriv_time - lap - f


def full_residual_oracle(problem: ProblemSpec, model, points) -> np.ndarray:
    """Residual summing second derivatives over every spatial dimension.

    ``model=None`` evaluates the closed-form exact solution.  Intended for
    small ``d`` (cost grows linearly with ``d`` per point).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :]
    s, t = mean_coordinate(problem, points)
    f = f_of(problem, s, t)
    if model is None:
        u = u_of(problem, s, t)
        lap = problem.d * d2u_of(problem, s, t)
        dt = dtu_of(problem, s, t) if problem.transient else None
    else:
        from .ansatz import partial1_points, partial2_points, predict_points

        u = predict_points(model, points)
        lap = sum(partial2_points(model, points, k) for k in range(problem.d))
        dt = partial1_points(model, points, problem.time_coord) if problem.transient else None
    if problem.name == "poisson":
        return -lap - f
    if problem.name == "sine_gordon":
        return -lap + np.sin(u) - f
    if problem.name == "allen_cahn":
        return -lap + u - u**3 - f
    return dt - lap - f
