"""Loss assembly, optimizers and the resampling training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import pde
from .ansatz import AnantModel, build_model, contract, grid_inputs, grid_jets, grid_values
from .bodynet import MlpSpec
from .jets import fd_check, value_and_grad
from .sampling import (
    GridBatch,
    SamplerConfig,
    make_boundary_grid,
    make_collocation_grid,
    make_initial_grid,
    partition_dimensions,
    sweep_active,
)

OPTIMIZERS = ("adamw", "lbfgs", "gd")
PHASES = ("boundary_sampling", "collocation_sampling", "loss_and_gradient", "optimizer_update")


class TrainingDiverged(RuntimeError):
    """A non-finite loss or gradient; ``log`` holds every finite step before it."""

    def __init__(self, message: str, log: "TrainLog"):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class Stage:
    optimizer: str = "adamw"
    learning_rate: float = 1e-3
    iterations: int = 1000
    sampling_frequency: int = 1000
    weight_decay: float = 0.0
    history: int = 10

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.iterations < 1:
            raise ValueError("every stage needs iterations >= 1")
        if self.sampling_frequency < 1:
            raise ValueError("sampling_frequency must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.history < 1:
            raise ValueError("history must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    problem: pde.ProblemSpec
    sampler: SamplerConfig
    specs: tuple
    stages: tuple
    rcfg: pde.ResidualConfig = pde.ResidualConfig()
    lambda_r: float = 1.0
    lambda_b: float = 15.0
    seed: int = 0
    reduction: str = "mean"
    check_gradients: bool = False

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("at least one training stage is required")
        if self.lambda_r < 0 or self.lambda_b < 0:
            raise ValueError("loss weights must be non-negative")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.sampler.d != self.problem.n_coords:
            raise ValueError(f"sampler has {self.sampler.d} coordinates, problem needs {self.problem.n_coords}")
        if self.sampler.B != len(self.specs):
            raise ValueError("sampler B must equal the number of body networks")
        if self.problem.transient and self.sampler.time_dim != self.problem.time_coord:
            raise ValueError("transient problems need sampler.time_dim set to the time coordinate")
        if self.problem.transient and self.sampler.num_initial_grids < 1:
            raise ValueError("transient problems need at least one initial grid")

    @property
    def B(self) -> int:
        return len(self.specs)

    @property
    def partition(self) -> list[list[int]]:
        return partition_dimensions(self.problem.n_coords, self.B, self.problem.time_coord)

    @property
    def time_network(self) -> int | None:
        return 0 if self.problem.transient else None


@dataclass
class TrainLog:
    iteration: list = field(default_factory=list)
    stage: list = field(default_factory=list)
    data_loss: list = field(default_factory=list)
    residual_loss: list = field(default_factory=list)
    total_loss: list = field(default_factory=list)
    phase_seconds: dict = field(default_factory=lambda: {p: [] for p in PHASES})
    resample_events: list = field(default_factory=list)
    grad_checks: list = field(default_factory=list)
    wall_seconds: float = 0.0

    def append(self, it, stage, data, res, total, phases):
        self.iteration.append(it)
        self.stage.append(stage)
        self.data_loss.append(data)
        self.residual_loss.append(res)
        self.total_loss.append(total)
        for p in PHASES:
            self.phase_seconds[p].append(phases.get(p, 0.0))

    def __len__(self) -> int:
        return len(self.iteration)

    def phase_totals(self) -> dict:
        return {p: float(np.sum(v)) for p, v in self.phase_seconds.items()}

    def to_csv(self, path, header_comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            w = csv.writer(fh)
            w.writerow(["iteration", "stage", "data_loss", "residual_loss", "total_loss", *PHASES])
            for k in range(len(self)):
                row = [self.iteration[k], self.stage[k]]
                row += [repr(float(v)) for v in (self.data_loss[k], self.residual_loss[k], self.total_loss[k])]
                row += [repr(float(self.phase_seconds[p][k])) for p in PHASES]
                w.writerow(row)


# ---------------------------------------------------------------------------
# batches


def grid_coordinates(problem: pde.ProblemSpec, grids: Sequence[GridBatch]):
    """Mean spatial coordinate ``s`` (and time) on stacked grids, shaped ``(G, n_1, ..., n_B)``.

    Built from per-axis broadcasts, so the cost is one pass over the represented
    points rather than one per coordinate.
    """
    G, B = len(grids), len(grids[0].active_dims)
    shape = (G,) + grids[0].shape
    tdim = problem.time_coord
    const = np.array([sum(v for k, v in zip(g.inactive_dims, g.inactive_values) if k != tdim) for g in grids])
    s = np.broadcast_to(const.reshape((G,) + (1,) * B), shape).copy()
    t = None
    for i, dim in enumerate(grids[0].active_dims):
        axis = np.stack([g.axis_coords[i] for g in grids])
        view = [G] + [1] * B
        view[i + 1] = axis.shape[1]
        if dim == tdim:
            t = np.broadcast_to(axis.reshape(view), shape)
        else:
            s = s + axis.reshape(view)
    if problem.transient and t is None:
        t = np.array([g.inactive_values[list(g.inactive_dims).index(tdim)] for g in grids]).reshape((G,) + (1,) * B)
        t = np.broadcast_to(t, shape)
    return s / problem.d, t


@dataclass
class Batch:
    active: tuple
    collocation: list
    data: list
    collocation_inputs: list
    data_inputs: list
    forcing: np.ndarray
    target: np.ndarray
    padded: tuple = ()

    @property
    def n_collocation(self) -> int:
        return int(self.forcing.size)

    @property
    def n_data(self) -> int:
        return int(self.target.size)


class Resampler:
    """Draws grids for successive active tuples of seeded epoch sweeps."""

    def __init__(self, cfg: TrainConfig, model: AnantModel):
        self.cfg = cfg
        self.model = model
        self.rng = np.random.default_rng(cfg.sampler.seed)
        self.epoch = -1
        self._queue: list = []

    def _next_active(self):
        if not self._queue:
            self.epoch += 1
            seed = np.random.SeedSequence([self.cfg.sampler.seed, self.epoch]).generate_state(1)[0]
            tuples, pads = sweep_active(self.cfg.partition, int(seed), return_padding=True)
            self._queue = list(zip(tuples, pads))
        return self._queue.pop(0)

    def draw(self, timers: dict) -> Batch:
        cfg, sc, problem = self.cfg, self.cfg.sampler, self.cfg.problem
        active, padded = self._next_active()
        t0 = time.perf_counter()
        data = [make_boundary_grid(sc, active, self.rng) for _ in range(sc.num_boundary_grids)]
        data += [make_initial_grid(sc, active, self.rng) for _ in range(sc.num_initial_grids)]
        s, t = grid_coordinates(problem, data)
        target = pde.u_of(problem, s, t)
        data_inputs = grid_inputs(self.model, data)
        t1 = time.perf_counter()
        colloc = [make_collocation_grid(sc, active, self.rng) for _ in range(sc.num_collocation_grids)]
        s, t = grid_coordinates(problem, colloc)
        f = pde.f_of(problem, s, t)
        colloc_inputs = grid_inputs(self.model, colloc)
        t2 = time.perf_counter()
        timers["boundary_sampling"] = timers.get("boundary_sampling", 0.0) + t1 - t0
        timers["collocation_sampling"] = timers.get("collocation_sampling", 0.0) + t2 - t1
        return Batch(tuple(active), colloc, data, colloc_inputs, data_inputs, f, target, tuple(padded))


# ---------------------------------------------------------------------------
# losses


def _reduce(sq, reduction: str):
    return ad.mean(sq) if reduction == "mean" else ad.sum(sq)


def data_loss(model: AnantModel, theta, batch: Batch, reduction: str = "mean"):
    """Squared error between the grid prediction and the manufactured data."""
    if not batch.data:
        raise ValueError("data_loss needs at least one boundary or initial grid")
    u = contract(grid_values(model, theta, batch.data, batch.data_inputs))
    err = u - batch.target
    return _reduce(err * err, reduction)


def residual_terms(model: AnantModel, theta, batch: Batch, problem: pde.ProblemSpec, rcfg: pde.ResidualConfig):
    """PDE residual on the stacked collocation grids (derivatives along active dims only)."""
    if not batch.collocation:
        raise ValueError("residual_loss needs at least one collocation grid")
    jets = grid_jets(model, theta, batch.collocation, batch.collocation_inputs)
    values = [j.v for j in jets]
    u = contract(values)
    second, dt = [], None
    for i, j in enumerate(jets):
        if i == model.time_network:
            if j.d1 is not None:
                dt = contract(values[:i] + [j.d1] + values[i + 1 :])
            else:
                dt = np.zeros(batch.forcing.shape)
            continue
        if j.d2 is None:
            # affine along this coordinate
            second.append(np.zeros(batch.forcing.shape))
        else:
            second.append(contract(values[:i] + [j.d2] + values[i + 1 :]))
    return pde.residual(problem, rcfg, u, second, batch.forcing, model.B, dt)


def residual_loss(model: AnantModel, theta, batch: Batch, problem: pde.ProblemSpec, rcfg: pde.ResidualConfig, reduction: str = "mean"):
    r = residual_terms(model, theta, batch, problem, rcfg)
    return _reduce(r * r, reduction)


def total_loss(model: AnantModel, theta, batch: Batch, cfg: TrainConfig):
    """``(lambda_b * data + lambda_r * residual, data, residual)``."""
    data = data_loss(model, theta, batch, cfg.reduction)
    res = residual_loss(model, theta, batch, cfg.problem, cfg.rcfg, cfg.reduction)
    return cfg.lambda_b * data + cfg.lambda_r * res, data, res


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamWState":
        return cls(np.zeros(n), np.zeros(n), 0)


def _check_finite(grad, what="gradient"):
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite {what}")


def adamw_step(state: AdamWState, params, grad, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
    """Adam with decoupled weight decay; returns ``(state, params)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != np.shape(params):
        raise ValueError("gradient and parameter shapes differ")
    _check_finite(grad)
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    new = params - lr * weight_decay * params - lr * mhat / (np.sqrt(vhat) + eps)
    return AdamWState(m, v, t), new


def gd_step(params, grad, lr: float):
    grad = np.asarray(grad, dtype=np.float64)
    _check_finite(grad)
    return params - lr * grad


@dataclass
class LbfgsState:
    history: int = 10
    c1: float = 1e-4
    max_backtracks: int = 40
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    cached: tuple | None = None
    last_direction: np.ndarray | None = None
    last_step: float = 0.0

    def reset(self) -> None:
        """Drop curvature pairs and the cached evaluation (the objective changed)."""
        self.s.clear()
        self.y.clear()
        self.cached = None


def _two_loop(g, s_list, y_list):
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_list), reversed(y_list)):
        rho = 1.0 / (y @ s)
        a = rho * (s @ q)
        alphas.append((a, rho))
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= (s @ y) / (y @ y)
    for (s, y), (a, rho) in zip(zip(s_list, y_list), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def lbfgs_step(state: LbfgsState, params, loss_fn: Callable, lr: float):
    """One L-BFGS step with Armijo backtracking from step ``lr``.

    ``loss_fn(theta) -> (value, gradient)``.  Returns ``(state, params, value)``
    where ``value`` is the loss at the incoming parameters.
    """
    params = np.asarray(params, dtype=np.float64)
    if state.cached is not None and np.array_equal(state.cached[0], params):
        f, g = state.cached[1], state.cached[2]
    else:
        f, g = loss_fn(params)
    _check_finite(np.atleast_1d(f), "loss")
    _check_finite(g)
    if not np.any(g):
        state.cached = (params, f, g)
        state.last_direction, state.last_step = np.zeros_like(g), 0.0
        return state, params, f
    d = _two_loop(g, state.s, state.y)
    slope = g @ d
    if not slope < 0:
        state.s.clear()
        state.y.clear()
        d = -g
        slope = g @ d
    step = lr
    for _ in range(state.max_backtracks):
        x_new = params + step * d
        f_new, g_new = loss_fn(x_new)
        if np.isfinite(f_new) and f_new <= f + state.c1 * step * slope:
            break
        step *= 0.5
    else:
        # no acceptable step: stay put and restart from steepest descent
        state.reset()
        state.cached = (params, f, g)
        state.last_direction, state.last_step = d, 0.0
        return state, params, f
    _check_finite(g_new)
    s_vec, y_vec = x_new - params, g_new - g
    sy = s_vec @ y_vec
    if sy > 1e-10 * np.linalg.norm(s_vec) * np.linalg.norm(y_vec) and sy > 1e-200:
        state.s.append(s_vec)
        state.y.append(y_vec)
        if len(state.s) > state.history:
            state.s.pop(0)
            state.y.pop(0)
    state.cached = (x_new, f_new, g_new)
    state.last_direction, state.last_step = d, step
    return state, x_new, f


# ---------------------------------------------------------------------------
# training loop


def _loss_and_grad(model, batch, cfg, theta):
    parts = {}

    def fn(th):
        total, data, res = total_loss(model, th, batch, cfg)
        parts["data"], parts["res"] = float(ad.value_of(data)), float(ad.value_of(res))
        return total

    value, grad = value_and_grad(fn, theta)
    return value, grad, parts["data"], parts["res"]


def _spot_check(model, batch, cfg, theta, rng, n=20):
    idx = rng.choice(theta.size, size=min(n, theta.size), replace=False)
    fn = lambda th: total_loss(model, th, batch, cfg)[0]  # noqa: E731
    rows = fd_check(fn, theta, idx, h=1e-6)
    return float(rows[:, 2].max())


def train(cfg: TrainConfig, model: AnantModel | None = None, progress: Callable | None = None):
    """Run every stage in order; returns ``(model, log)``.

    Grids are redrawn every ``sampling_frequency`` iterations of a stage (and
    at each stage start).  L-BFGS history is cleared on every redraw.
    """
    if model is None:
        model = build_model(cfg.specs, cfg.partition, cfg.seed, cfg.time_network)
    elif [list(p) for p in model.partition] != cfg.partition:
        raise ValueError("model partition does not match the configuration")
    theta = model.params.values.copy()
    sampler = Resampler(cfg, model)
    log = TrainLog()
    check_rng = np.random.default_rng(cfg.seed + 7919)
    start = time.perf_counter()
    it = 0
    batch = None
    try:
        for k, stage in enumerate(cfg.stages):
            adam = AdamWState.zeros(theta.size)
            lbfgs = LbfgsState(history=stage.history)
            splits: dict = {}
            for i in range(stage.iterations):
                phases = {}
                if i % stage.sampling_frequency == 0:
                    batch = sampler.draw(phases)
                    lbfgs.reset()
                    log.resample_events.append({"iteration": it, "stage": k, "active": list(batch.active), "padded": list(batch.padded), "epoch": sampler.epoch})
                    if cfg.check_gradients and i == 0:
                        log.grad_checks.append({"stage": k, "max_rel": _spot_check(model, batch, cfg, theta, check_rng)})
                t0 = time.perf_counter()
                if stage.optimizer == "lbfgs":
                    if i % stage.sampling_frequency == 0:
                        splits.clear()
                    tl = time.perf_counter()
                    key = theta.tobytes()
                    lbfgs, theta, value = lbfgs_step(lbfgs, theta, _timed(lambda th: _split_eval(model, batch, cfg, th, splits), phases), stage.learning_rate)
                    data_v, res_v = splits[key]
                    # keep only the accepted point's split for the next step
                    keep = theta.tobytes()
                    for kk in [kk for kk in splits if kk != keep]:
                        del splits[kk]
                    phases["optimizer_update"] = time.perf_counter() - tl - phases.get("loss_and_gradient", 0.0)
                else:
                    value, grad, data_v, res_v = _loss_and_grad(model, batch, cfg, theta)
                    t1 = time.perf_counter()
                    phases["loss_and_gradient"] = t1 - t0
                    if not np.isfinite(value):
                        raise FloatingPointError("non-finite loss")
                    if stage.optimizer == "adamw":
                        adam, theta = adamw_step(adam, theta, grad, stage.learning_rate, stage.weight_decay)
                    else:
                        theta = gd_step(theta, grad, stage.learning_rate)
                    phases["optimizer_update"] = time.perf_counter() - t1
                if not np.isfinite(value):
                    raise FloatingPointError("non-finite loss")
                log.append(it, k, data_v, res_v, cfg.lambda_b * data_v + cfg.lambda_r * res_v, phases)
                if progress is not None:
                    progress(it, log)
                it += 1
    except FloatingPointError as exc:
        log.wall_seconds = time.perf_counter() - start
        raise TrainingDiverged(f"training aborted at iteration {it}: {exc}", log) from exc
    log.wall_seconds = time.perf_counter() - start
    return model.with_params(theta), log


def _timed(fn, phases):
    def wrapped(th):
        t = time.perf_counter()
        out = fn(th)
        phases["loss_and_gradient"] = phases.get("loss_and_gradient", 0.0) + time.perf_counter() - t
        return out

    return wrapped


def _split_eval(model, batch, cfg, theta, splits):
    value, grad, dl, rl = _loss_and_grad(model, batch, cfg, theta)
    splits[theta.tobytes()] = (dl, rl)
    return value, grad


# ---------------------------------------------------------------------------
# preconditioning study


@dataclass
class PreconditioningResult:
    gd: TrainLog
    qn: TrainLog

    @property
    def final_ratio(self) -> float:
        """Quasi-Newton final total loss over plain-GD final total loss."""
        return self.qn.total_loss[-1] / self.gd.total_loss[-1]


def preconditioning_study(
    cfg: TrainConfig,
    iterations: int | None = None,
    gd_lr: float = 1e-2,
    qn_lr: float = 1.0,
    sampling_frequency: int | None = None,
) -> PreconditioningResult:
    """Plain gradient descent vs L-BFGS on a linear Anant-Net.

    Both runs start from the same initialization and see the same grids
    (the sampler seed is shared).  Iteration count and sampling frequency
    default to the first stage of ``cfg``.
    """
    for spec in cfg.specs:
        if not isinstance(spec, MlpSpec) or spec.activation != "identity":
            raise ValueError("the preconditioning study needs MLP body networks with identity activation")
    first = cfg.stages[0]
    n = first.iterations if iterations is None else iterations
    sf = first.sampling_frequency if sampling_frequency is None else sampling_frequency
    model = build_model(cfg.specs, cfg.partition, cfg.seed, cfg.time_network)
    gd_cfg = replace(cfg, stages=(Stage("gd", gd_lr, n, sf),))
    qn_cfg = replace(cfg, stages=(Stage("lbfgs", qn_lr, n, sf),))
    _, gd_log = train(gd_cfg, model)
    _, qn_log = train(qn_cfg, model)
    return PreconditioningResult(gd_log, qn_log)
