from dataclasses import replace

import numpy as np
import pytest

from anantnet import pde
from anantnet.ansatz import AnantModel, build_model, contract, grid_values, model_layout, partial1_points, partial2_points, predict_points
from anantnet.bodynet import MlpSpec, ParamVector, layout
from anantnet.jets import fd_check
from anantnet.pde import ProblemSpec
from anantnet.sampling import GridBatch, SamplerConfig, partition_dimensions
from anantnet.train import (
    AdamWState,
    Batch,
    LbfgsState,
    Resampler,
    Stage,
    TrainConfig,
    TrainingDiverged,
    _two_loop,
    adamw_step,
    data_loss,
    grid_coordinates,
    lbfgs_step,
    preconditioning_study,
    residual_loss,
    residual_terms,
    total_loss,
    train,
)


def _cfg(d=6, B=3, width=8, r=4, stages=None, problem="poisson", activation="tanh", **kw):
    prob = ProblemSpec(problem, d)
    tdim = prob.time_coord
    sc_kw = dict(n_c=5, num_collocation_grids=2, n_b=3, num_boundary_grids=4)
    if prob.transient:
        sc_kw["num_initial_grids"] = 2
    sc_kw.update(kw.pop("sampler", {}))
    sc = SamplerConfig(prob.bounds(), B, time_dim=tdim, **sc_kw)
    part = partition_dimensions(prob.n_coords, B, tdim)
    specs = [MlpSpec(len(p), (width,), r, activation) for p in part]
    stages = stages or (Stage("adamw", 1e-2, 50, 10),)
    return TrainConfig(prob, sc, specs, stages, **kw)


def _batch(cfg, seed=0):
    model = build_model(cfg.specs, cfg.partition, seed, cfg.time_network)
    return model, Resampler(cfg, model).draw({})


def _constant_model(d, value):
    specs = [MlpSpec(1, (), 1, "identity")] * d
    vals = []
    for i, s in enumerate(specs):
        t = {"W1": np.zeros((1, 1)), "b1": np.array([value if i == 0 else 1.0])}
        vals.append(ParamVector.pack(t, layout(s)).values)
    return AnantModel(specs, ParamVector(np.concatenate(vals), model_layout(specs)), [[k] for k in range(d)])


# ---------------------------------------------------------------------------
# losses


def test_data_loss_constant_model():
    cfg = _cfg(d=4, B=4, sampler=dict(num_boundary_grids=1), problem="poisson")
    model = _constant_model(4, 0.7)
    # hand-made batch with a constant target
    g = GridBatch((0, 1, 2, 3), [[0.1, 0.2]] * 4, (), [], "boundary")
    b = Batch((0, 1, 2, 3), [], [g], [], [np.array([[0.1], [0.2]])] * 4, np.zeros(0), np.full((1, 2, 2, 2, 2), -0.3))
    assert float(data_loss(model, model.params.values, b)) == pytest.approx(1.0**2, abs=1e-15)
    assert float(data_loss(model, model.params.values, b, "sum")) == pytest.approx(16.0, abs=1e-13)


def test_data_loss_matches_point_loop():
    cfg = _cfg()
    model, b = _batch(cfg)
    theta = model.params.values
    errs = []
    for g in b.data:
        P = g.points()
        errs.append(predict_points(model, P) - pde.exact_solution(cfg.problem, P))
    expect = np.mean(np.concatenate(errs) ** 2)
    assert float(data_loss(model, theta, b)) == pytest.approx(expect, abs=1e-14)


def test_data_loss_zero_for_matching_target():
    cfg = _cfg()
    model, b = _batch(cfg)
    b.target = contract(grid_values(model, model.params.values, b.data))
    assert float(data_loss(model, model.params.values, b)) == 0.0


def test_residual_loss_zero_model_is_mean_f_squared():
    cfg = _cfg()
    model, b = _batch(cfg)
    zero = np.zeros(model.params.values.size)
    assert float(residual_loss(model, zero, b, cfg.problem, cfg.rcfg)) == pytest.approx(np.mean(b.forcing**2), abs=1e-15)


def test_residual_terms_single_point_matches_pointwise():
    cfg = _cfg(sampler=dict(n_c=2))
    model, b = _batch(cfg)
    r = residual_terms(model, model.params.values, b, cfg.problem, cfg.rcfg)
    g = b.collocation[0]
    P = g.points()
    lap = sum(partial2_points(model, P, a) for a in g.active_dims)
    expect = -lap - pde.forcing(cfg.problem, P)
    assert np.allclose(r[0].reshape(-1), expect, atol=1e-13)


def test_heat_residual_uses_time_derivative():
    cfg = _cfg(d=4, problem="heat", sampler=dict(n_c=3))
    model, b = _batch(cfg)
    r = residual_terms(model, model.params.values, b, cfg.problem, cfg.rcfg)
    g = b.collocation[1]
    P = g.points()
    spatial = [a for a in g.active_dims if a != cfg.problem.time_coord]
    expect = partial1_points(model, P, 4) - sum(partial2_points(model, P, a) for a in spatial) - pde.forcing(cfg.problem, P)
    assert np.allclose(r[1].reshape(-1), expect, atol=1e-13)


def test_total_loss_combination():
    base = _cfg()
    model, b = _batch(base)
    theta = model.params.values
    d, r = float(data_loss(model, theta, b)), float(residual_loss(model, theta, b, base.problem, base.rcfg))
    assert float(total_loss(model, theta, b, replace(base, lambda_b=0.0))[0]) == pytest.approx(r, abs=0)
    assert float(total_loss(model, theta, b, replace(base, lambda_r=0.0))[0]) == pytest.approx(15 * d, rel=1e-15)
    t, dd, rr = total_loss(model, theta, b, replace(base, lambda_r=0.3, lambda_b=2.5))
    assert abs(float(t) - (2.5 * d + 0.3 * r)) <= 1e-15 * max(1.0, float(t))
    # residual term is independent of lambda_b
    assert float(rr) == float(total_loss(model, theta, b, replace(base, lambda_b=99.0))[2])


def test_grid_coordinates_mean_and_time():
    cfg = _cfg(d=4, problem="heat")
    _, b = _batch(cfg)
    s, t = grid_coordinates(cfg.problem, b.data)
    P = np.concatenate([g.points() for g in b.data])
    assert np.allclose(np.broadcast_to(s, b.target.shape).reshape(-1), P[:, :4].mean(axis=1), atol=1e-15)
    assert np.allclose(np.broadcast_to(t, b.target.shape).reshape(-1), P[:, 4], atol=0)


# ---------------------------------------------------------------------------
# optimizers


def test_adamw_zero_gradient_no_move():
    st, p = adamw_step(AdamWState.zeros(3), np.array([1.0, -2.0, 3.0]), np.zeros(3), 0.1)
    assert np.array_equal(p, [1.0, -2.0, 3.0]) and st.t == 1


def test_adamw_first_step():
    _, p = adamw_step(AdamWState.zeros(1), np.array([1.0]), np.array([1.0]), 0.1)
    # mhat = 1, vhat = 1 after bias correction: step = lr / (1 + eps)
    assert p[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)
    assert p[0] == pytest.approx(0.9, abs=1e-8)


def test_adamw_decoupled_decay():
    _, p = adamw_step(AdamWState.zeros(2), np.array([2.0, -4.0]), np.zeros(2), 0.1, weight_decay=0.5)
    assert np.allclose(p, np.array([2.0, -4.0]) * (1 - 0.05), atol=1e-15)


def test_adamw_rejects_nan():
    with pytest.raises(FloatingPointError):
        adamw_step(AdamWState.zeros(1), np.zeros(1), np.array([np.nan]), 0.1)


def _quadratic(A):
    return lambda th: (0.5 * th @ A @ th, A @ th)


def test_lbfgs_quadratic_benchmark():
    A = np.diag([1.0, 100.0])
    fn = _quadratic(A)
    st, th = LbfgsState(), np.array([1.0, 1.0])
    for _ in range(50):
        st, th, _ = lbfgs_step(st, th, fn, 1.0)
    assert np.linalg.norm(th) <= 1e-8


def test_lbfgs_zero_gradient_no_move():
    st, th, f = lbfgs_step(LbfgsState(), np.zeros(3), _quadratic(np.eye(3)), 1.0)
    assert np.array_equal(th, np.zeros(3)) and f == 0.0


def test_lbfgs_empty_history_is_steepest_descent():
    g = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(_two_loop(g, [], []), -g)
    st = LbfgsState()
    A = np.diag([1.0, 3.0, 7.0])
    th = np.array([1.0, 1.0, 1.0])
    for _ in range(3):
        st, th, _ = lbfgs_step(st, th, _quadratic(A), 0.1)
    st.reset()
    st, th2, _ = lbfgs_step(st, th, _quadratic(A), 0.1)
    d = st.last_direction
    grad = A @ th
    cos = -(d @ grad) / (np.linalg.norm(d) * np.linalg.norm(grad))
    assert cos == pytest.approx(1.0, abs=1e-14)


def test_lbfgs_armijo_backtracks():
    st, th, _ = lbfgs_step(LbfgsState(), np.array([1.0]), _quadratic(np.eye(1) * 10.0), 1.0)
    # step 1 overshoots to -9; halving until Armijo accepts
    assert 0 < st.last_step < 1.0
    assert abs(th[0]) < 1.0


# ---------------------------------------------------------------------------
# training loop


def test_train_smoke_loss_drop():
    cfg = _cfg(stages=(Stage("adamw", 1e-2, 200, 1000),))
    _, log = train(cfg)
    assert log.total_loss[-1] < 0.1 * log.total_loss[0]


def test_train_is_deterministic():
    cfg = _cfg(stages=(Stage("adamw", 1e-2, 20, 5), Stage("lbfgs", 1e-2, 10, 5)))
    _, a = train(cfg)
    _, b = train(cfg)
    assert a.total_loss == b.total_loss and a.data_loss == b.data_loss


def test_log_decomposition_and_resample_schedule():
    cfg = _cfg(stages=(Stage("adamw", 1e-2, 12, 4), Stage("lbfgs", 1e-2, 6, 3)))
    _, log = train(cfg)
    for t, d, r in zip(log.total_loss, log.data_loss, log.residual_loss):
        assert t == cfg.lambda_b * d + cfg.lambda_r * r
    assert [e["iteration"] for e in log.resample_events] == [0, 4, 8, 12, 15]
    # the sweep covers each dimension once per epoch
    first_epoch = [e for e in log.resample_events if e["epoch"] == 0]
    assert sorted(k for e in first_epoch for k in e["active"]) == list(range(6))
    totals = sum(log.phase_totals().values())
    assert totals <= log.wall_seconds


def test_stage_validation():
    with pytest.raises(ValueError):
        Stage("adamw", 1e-3, 0)
    with pytest.raises(ValueError):
        Stage("sgd")
    with pytest.raises(ValueError):
        Stage("adamw", 1e-3, 10, 0)
    with pytest.raises(ValueError):
        replace(_cfg(), stages=())


def test_gradient_spot_check_each_stage():
    cfg = _cfg(stages=(Stage("adamw", 1e-2, 3, 3), Stage("lbfgs", 1e-2, 2, 2)), check_gradients=True)
    _, log = train(cfg)
    assert len(log.grad_checks) == 2
    assert all(g["max_rel"] <= 1e-5 for g in log.grad_checks)


@pytest.mark.parametrize("name", pde.PROBLEMS)
def test_full_loss_gradient_matches_fd(name):
    cfg = _cfg(problem=name, activation="sin" if name == "heat" else "tanh")
    model, b = _batch(cfg)
    theta = model.params.values
    fn = lambda th: total_loss(model, th, b, cfg)[0]  # noqa: E731
    idx = np.random.default_rng(1).choice(theta.size, 20, replace=False)
    rows = fd_check(fn, theta, idx, h=1e-6)
    assert rows[:, 2].max() <= 1e-5


def test_divergence_raises_with_log():
    cfg = _cfg(stages=(Stage("gd", 1e6, 50, 50),))
    with pytest.raises(TrainingDiverged) as info, np.errstate(all="ignore"):
        train(cfg)
    log = info.value.log
    assert all(np.isfinite(log.total_loss))


def test_train_log_csv(tmp_path):
    cfg = _cfg(stages=(Stage("adamw", 1e-2, 5, 5),))
    _, log = train(cfg)
    path = tmp_path / "log.csv"
    log.to_csv(path, "config_hash=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1].startswith("iteration,stage,data_loss,residual_loss,total_loss,boundary_sampling")
    data = np.loadtxt(path, delimiter=",", skiprows=2)
    assert np.array_equal(data[:, 4], log.total_loss)


def test_preconditioning_requires_linear_model():
    with pytest.raises(ValueError):
        preconditioning_study(_cfg())


def test_preconditioning_shared_start():
    cfg = _cfg(activation="identity", stages=(Stage("gd", 1e-2, 20, 10),))
    res = preconditioning_study(cfg, iterations=20)
    assert res.gd.total_loss[0] == res.qn.total_loss[0]
    assert len(res.gd) == len(res.qn) == 20
    assert res.final_ratio == res.qn.total_loss[-1] / res.gd.total_loss[-1]
