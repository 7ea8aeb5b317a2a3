"""Test-phase metrics, multi-seed statistics, slice exports and studies."""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import pde
from .ansatz import AnantModel, predict_points
from .sampling import partition_dimensions, sample_test_points
from .train import TrainConfig, TrainingDiverged, train

SWEEP_AXES = ("boundary_volume", "collocation_volume", "batch_size")
STD_CONVENTION = "population"


def relative_l2(pred, exact) -> float:
    """Percentage relative L2 error ``100 * ||pred - exact|| / ||exact||``."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    exact = np.asarray(exact, dtype=np.float64).reshape(-1)
    if pred.shape != exact.shape:
        raise ValueError("pred and exact must have the same length")
    norm = np.linalg.norm(exact)
    if norm == 0:
        raise ValueError("relative error is undefined for an all-zero reference")
    return float(100.0 * np.linalg.norm(pred - exact) / norm)


@dataclass
class EvalResult:
    rel_l2_percent: float
    n_test: int
    seed: int | None = None
    per_seed: list = field(default_factory=list)
    seeds: list = field(default_factory=list)
    failed_seeds: list = field(default_factory=list)
    mean: float = 0.0
    std: float = 0.0
    std_convention: str = STD_CONVENTION

    def to_dict(self) -> dict:
        return {
            "rel_l2_percent": self.rel_l2_percent,
            "n_test": self.n_test,
            "seed": self.seed,
            "per_seed": list(self.per_seed),
            "seeds": list(self.seeds),
            "failed_seeds": list(self.failed_seeds),
            "mean": self.mean,
            "std": self.std,
            "std_convention": self.std_convention,
        }


def aggregate(errors: Sequence[float], seeds: Sequence[int], n_test: int, failed: Sequence[int] = ()) -> EvalResult:
    """Mean and population standard deviation of per-seed errors."""
    errors = [float(e) for e in errors]
    if not errors:
        raise ValueError("no successful seeds to aggregate")
    mean = float(np.mean(errors))
    std = float(np.std(errors))
    return EvalResult(mean, n_test, None, errors, list(seeds), list(failed), mean, std)


def draw_test_points(problem: pde.ProblemSpec, n_test: int, seed) -> np.ndarray:
    """Scattered uniform points in the open domain (time included for transient problems)."""
    return sample_test_points(problem.n_coords, n_test, problem.bounds(), seed)


def evaluate_model(model: AnantModel, problem: pde.ProblemSpec, n_test: int = 10_000, seed=0) -> EvalResult:
    X = draw_test_points(problem, n_test, seed)
    err = relative_l2(predict_points(model, X), pde.exact_solution(problem, X))
    return EvalResult(err, n_test, seed, [err], [seed], [], err, 0.0)


def multi_seed_eval(
    cfg: TrainConfig,
    n_seeds: int = 10,
    n_test: int = 10_000,
    seeds: Sequence[int] | None = None,
    models: Sequence[AnantModel] | None = None,
    test_seed_offset: int = 10_000,
) -> EvalResult:
    """Train (or take) one model per seed and evaluate each on fresh test points.

    Each seed sets both the initialization and the sampler stream.  Seeds
    whose training diverges are excluded with a warning.
    """
    if n_seeds < 2:
        raise ValueError("multi-seed evaluation needs n_seeds >= 2")
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)
    if len(seeds) != n_seeds:
        raise ValueError("len(seeds) must equal n_seeds")
    if models is not None and len(models) != n_seeds:
        raise ValueError("one model per seed is required")
    errors, ok, failed = [], [], []
    for k, seed in enumerate(seeds):
        if models is not None:
            model = models[k]
        else:
            run = replace(cfg, seed=seed, sampler=replace(cfg.sampler, seed=seed))
            try:
                model, _ = train(run)
            except TrainingDiverged as exc:
                warnings.warn(f"seed {seed} failed: {exc}")
                failed.append(seed)
                continue
        errors.append(evaluate_model(model, cfg.problem, n_test, seed + test_seed_offset).rel_l2_percent)
        ok.append(seed)
    return aggregate(errors, ok, n_test, failed)


# ---------------------------------------------------------------------------
# slice export


@dataclass
class SliceResult:
    path: str
    max_abs_error: float
    active: tuple
    inactive_values: np.ndarray


def slice_error_export(
    model: AnantModel,
    problem: pde.ProblemSpec,
    active_triple,
    path,
    resolution: int = 50,
    inactive_values=None,
    seed=0,
    config_hash: str = "",
) -> SliceResult:
    """Point-wise ``|u_hat - u_exact|`` on a ``resolution**3`` cube through the domain.

    Three coordinates vary over the box; every other coordinate is fixed to
    ``inactive_values`` (drawn uniformly from the interior when omitted).
    """
    triple = tuple(int(a) for a in active_triple)
    n = problem.n_coords
    if len(triple) != 3 or len(set(triple)) != 3 or any(not 0 <= a < n for a in triple):
        raise ValueError(f"need three distinct coordinates in 0..{n - 1}, got {triple}")
    if model.d != n:
        raise ValueError(f"model has {model.d} coordinates, problem needs {n}")
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    owners = [model.owner(a)[0] for a in triple]
    if model.B >= 3 and len(set(owners)) != 3:
        raise ValueError("slice coordinates must come from three different body networks")
    bounds = problem.bounds()
    inactive = [k for k in range(n) if k not in triple]
    if inactive_values is None:
        inactive_values = sample_test_points(len(inactive), 1, bounds[inactive], seed)[0] if inactive else np.empty(0)
    inactive_values = np.asarray(inactive_values, dtype=np.float64)
    if inactive_values.shape != (len(inactive),):
        raise ValueError(f"need {len(inactive)} inactive values")
    axes = [np.linspace(bounds[a, 0], bounds[a, 1], resolution) for a in triple]
    mesh = np.meshgrid(*axes, indexing="ij")
    X = np.empty((resolution**3, n))
    X[:, inactive] = inactive_values
    for a, m in zip(triple, mesh):
        X[:, a] = m.reshape(-1)
    err = np.abs(predict_points(model, X) - pde.exact_solution(problem, X))
    max_err = float(err.max())
    meta = {
        "config_hash": config_hash,
        "active": list(triple),
        "inactive_dims": inactive,
        "inactive_values": [float(v) for v in inactive_values],
        "max_abs_error": max_err,
    }
    try:
        with open(path, "w", newline="") as fh:
            fh.write("# " + json.dumps(meta) + "\n")
            w = csv.writer(fh)
            w.writerow(["x_p", "x_q", "x_r", "abs_error"])
            for row in np.column_stack([X[:, list(triple)], err]):
                w.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write slice export to {path}: {exc}") from exc
    return SliceResult(str(path), max_err, triple, inactive_values)


def read_slice_csv(path) -> tuple[dict, np.ndarray]:
    """Header metadata and the ``(rows, 4)`` data of a slice export."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError("missing slice metadata header")
        meta = json.loads(first[2:])
        data = np.loadtxt(fh, delimiter=",", skiprows=1, ndmin=2)
    return meta, data


# ---------------------------------------------------------------------------
# studies


def _respec(cfg: TrainConfig, B: int) -> tuple:
    """Body-network specs for ``B`` networks, reusing the spatial (and time) templates."""
    part = partition_dimensions(cfg.problem.n_coords, B, cfg.problem.time_coord)
    template = cfg.specs[-1]
    specs = []
    for k, p in enumerate(part):
        base = cfg.specs[0] if (cfg.problem.transient and k == 0) else template
        specs.append(replace(base, input_dim=len(p)))
    return tuple(specs)


def sweep_config(base: TrainConfig, axis: str, value) -> TrainConfig:
    sc = base.sampler
    if axis == "boundary_volume":
        return replace(base, sampler=replace(sc, num_boundary_grids=int(value)))
    if axis == "collocation_volume":
        return replace(base, sampler=replace(sc, n_c=int(value)))
    if axis == "batch_size":
        B = int(value)
        if B > base.problem.n_coords:
            raise ValueError(f"batch size {B} exceeds the {base.problem.n_coords} coordinates")
        # hold total collocation / data counts fixed
        cg = max(1, round(sc.total_collocation_points() / sc.n_c**B))
        bg = max(1, round(sc.total_boundary_points() / sc.n_b**B))
        ig = max(1, round(sc.total_initial_points() / sc.n_b**B)) if sc.num_initial_grids else 0
        new = replace(sc, B=B, num_collocation_grids=cg, num_boundary_grids=bg, num_initial_grids=ig)
        return replace(base, sampler=new, specs=_respec(base, B))
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sensitivity_sweep(base_cfg: TrainConfig, axis: str, values, n_test: int = 10_000, test_seed: int = 12345) -> list[dict]:
    """One train + eval per value along ``axis``; everything else held fixed."""
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    cfgs = [sweep_config(base_cfg, axis, v) for v in values]
    rows = []
    for v, cfg in zip(values, cfgs):
        t = time.perf_counter()
        model, _ = train(cfg)
        wall = time.perf_counter() - t
        err = evaluate_model(model, cfg.problem, n_test, test_seed).rel_l2_percent
        rows.append({"axis_value": v, "rel_l2_percent": err, "wall_seconds": wall})
    return rows


def runtime_scaling_report(cfg_for_d: Callable[[int], TrainConfig], dims: Sequence[int], warmup: int = 5) -> list[dict]:
    """Mean per-iteration wall time for each ``d`` (first ``warmup`` iterations dropped).

    Per-iteration time is the sum of that iteration's phase timers.
    """
    rows = []
    for d in dims:
        cfg = cfg_for_d(d)
        _, log = train(cfg)
        per_it = np.sum([log.phase_seconds[p] for p in log.phase_seconds], axis=0)[warmup:]
        if per_it.size == 0:
            raise ValueError("not enough iterations after warmup")
        rows.append({"d": d, "iters_timed": int(per_it.size), "mean_iter_seconds": float(per_it.mean()), "std": float(per_it.std())})
    return rows


# ---------------------------------------------------------------------------
# output


def fmt(v) -> str:
    """Decimal rendering with full double precision for floats."""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_table(path, rows: Sequence[dict], columns: Sequence[str], config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r[c]) for c in columns])


def write_summary(path, config_hash: str, seeds, metrics: dict, timers: dict | None = None, extra: dict | None = None) -> dict:
    doc = {"config_hash": config_hash, "seeds": list(seeds), "metrics": metrics, "timers": timers or {}}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, default=_json_default)
    return doc


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")
