import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anantnet import autodiff as ad
from anantnet.ansatz import (
    AnantModel,
    build_model,
    contract,
    model_layout,
    partial1_grid,
    partial1_points,
    partial2_grid,
    partial2_points,
    predict_grid,
    predict_points,
)
from anantnet.bodynet import MlpSpec, ParamVector, layout, network_forward
from anantnet.jets import value_and_grad
from anantnet.sampling import GridBatch, SamplerConfig, make_collocation_grid, partition_dimensions


def _model(d, B, r=3, widths=(5,), act="tanh", seed=0):
    part = partition_dimensions(d, B)
    specs = [MlpSpec(len(p), widths, r, act) for p in part]
    return build_model(specs, part, seed)


def _grid(model, shape, seed):
    rng = np.random.default_rng(seed)
    active = tuple(int(rng.choice(p)) for p in model.partition)
    inactive = tuple(k for k in range(model.d) if k not in active)
    axes = [rng.uniform(-1, 1, n) for n in shape]
    return GridBatch(active, axes, inactive, rng.uniform(-1, 1, len(inactive)))


def _nested_loop(model, grid):
    """Brute-force sum_j prod_i F_i[a_i, j], one point at a time."""
    out = np.empty(grid.shape)
    for idx in itertools.product(*(range(n) for n in grid.shape)):
        x = grid.template()
        for k, a in enumerate(grid.active_dims):
            x[a] = grid.axis_coords[k][idx[k]]
        total = 0.0
        for j in range(model.r):
            p = 1.0
            for i, part in enumerate(model.partition):
                p *= network_forward(model.network_params(model.params.values, i), model.specs[i], x[list(part)][None, :])[0, j]
            total += p
        out[idx] = total
    return out


def _constant_net(spec, col):
    """Parameters of an identity-activation network whose output is the constant vector ``col``."""
    t = {e.name: np.zeros(e.shape) for e in layout(spec).entries}
    t[f"b{len(spec.hidden_widths) + 1}"] = np.asarray(col, dtype=float)
    return ParamVector.pack(t, layout(spec)).values


def test_scalar_product_example():
    specs = [MlpSpec(1, (), 1, "identity")] * 2
    theta = np.concatenate([_constant_net(specs[0], [2.0]), _constant_net(specs[1], [3.0])])
    model = AnantModel(specs, ParamVector(theta, model_layout(specs)), [[0], [1]])
    g = GridBatch((0, 1), [[0.1], [0.2]], (), [])
    assert predict_grid(model, g).tolist() == [[6.0]]


def test_all_ones_factors_give_all_ones():
    specs = [MlpSpec(1, (), 1, "identity")] * 3
    theta = np.concatenate([_constant_net(s, [1.0]) for s in specs])
    model = AnantModel(specs, ParamVector(theta, model_layout(specs)), [[0], [1], [2]])
    g = GridBatch((0, 1, 2), [np.linspace(-1, 1, 2), np.linspace(-1, 1, 3), np.linspace(-1, 1, 4)], (), [])
    assert np.array_equal(predict_grid(model, g), np.ones((2, 3, 4)))


@pytest.mark.parametrize("shape", [(2, 2, 2), (1, 4, 3), (5, 5, 5)])
def test_predict_grid_matches_nested_loop(shape):
    for seed in range(3):
        model = _model(7, 3, r=2, seed=seed)
        g = _grid(model, shape, seed)
        assert np.max(np.abs(predict_grid(model, g) - _nested_loop(model, g))) <= 1e-12


def test_point_and_grid_paths_agree():
    model = _model(6, 3)
    g = _grid(model, (3, 4, 2), 1)
    P = g.points()
    assert np.max(np.abs(predict_points(model, P) - predict_grid(model, g).reshape(-1))) <= 1e-14
    for a in g.active_dims:
        assert np.allclose(partial2_points(model, P, a), partial2_grid(model, g, a).reshape(-1), atol=1e-13)
        assert np.allclose(partial1_points(model, P, a), partial1_grid(model, g, a).reshape(-1), atol=1e-13)


def test_partial2_vanishes_for_linear_networks():
    model = _model(6, 3, act="identity", widths=(4,))
    g = _grid(model, (3, 3, 3), 2)
    for a in g.active_dims:
        assert np.max(np.abs(partial2_grid(model, g, a))) <= 1e-14


def test_partial_product_rule_analytic():
    # f1(x) = sin(x) has jet (sin x, cos x, -sin x); f2 = c constant, so d2 u = -c sin x
    c = 1.7
    s1 = MlpSpec(1, (1,), 1, "sin")
    t1 = ParamVector.pack({"W1": np.ones((1, 1)), "b1": np.zeros(1), "W2": np.ones((1, 1)), "b2": np.zeros(1)}, layout(s1)).values
    s2 = MlpSpec(1, (), 1, "identity")
    specs = [s1, s2]
    model = AnantModel(specs, ParamVector(np.concatenate([t1, _constant_net(s2, [c])]), model_layout(specs)), [[0], [1]])
    x = np.linspace(-1, 1, 5)
    g = GridBatch((0, 1), [x, [0.3, 0.9]], (), [])
    assert np.allclose(partial2_grid(model, g, 0), -c * np.sin(x)[:, None] * np.ones((1, 2)), atol=1e-15)
    assert np.allclose(partial1_grid(model, g, 0), c * np.cos(x)[:, None] * np.ones((1, 2)), atol=1e-15)


def test_partial1_linear_is_weight_product():
    specs = [MlpSpec(1, (), 1, "identity")] * 2
    t1 = ParamVector.pack({"W1": np.array([[2.5]]), "b1": np.array([0.0])}, layout(specs[0])).values
    t2 = _constant_net(specs[1], [-3.0])
    model = AnantModel(specs, ParamVector(np.concatenate([t1, t2]), model_layout(specs)), [[0], [1]])
    g = GridBatch((0, 1), [np.linspace(-1, 1, 4), np.linspace(-1, 1, 3)], (), [])
    assert np.allclose(partial1_grid(model, g, 0), -7.5, atol=1e-15)
    # constant network along coordinate 1
    assert np.all(partial1_grid(model, g, 1) == 0)


def test_partials_match_finite_differences():
    model = _model(6, 3, r=3, widths=(6, 6))
    P = np.random.default_rng(0).uniform(-0.8, 0.8, (20, 6))
    for coord in range(6):
        e = np.zeros(6)
        h = 1e-3
        e[coord] = h
        f0, fp, fm = predict_points(model, P), predict_points(model, P + e), predict_points(model, P - e)
        fd2 = (fp - 2 * f0 + fm) / h**2
        scale = np.maximum(np.abs(fd2), 1e-2)
        assert np.max(np.abs(partial2_points(model, P, coord) - fd2) / scale) <= 1e-5
        e[coord] = 1e-5
        fd1 = (predict_points(model, P + e) - predict_points(model, P - e)) / 2e-5
        scale = np.maximum(np.abs(fd1), 1e-2)
        assert np.max(np.abs(partial1_points(model, P, coord) - fd1) / scale) <= 1e-6


def test_contract_vjp_matches_fd():
    rng = np.random.default_rng(0)
    shapes = [(2, 3, 4), (2, 2, 4), (2, 5, 4)]
    vals = [rng.normal(size=s) for s in shapes]
    w = rng.normal(size=(2, 3, 2, 5))
    sizes = [v.size for v in vals]
    flat0 = np.concatenate([v.ravel() for v in vals])

    def fn(flat):
        parts, pos = [], 0
        for s, n in zip(shapes, sizes):
            seg = flat[pos : pos + n]
            parts.append(ad.reshape(seg, s) if ad.is_var(seg) else seg.reshape(s))
            pos += n
        return ad.sum(contract(parts) * w)

    _, g = value_and_grad(fn, flat0)
    for k in range(0, flat0.size, 7):
        t = flat0.copy()
        t[k] += 1e-6
        fp = fn(t)
        t[k] -= 2e-6
        assert g[k] == pytest.approx((fp - fn(t)) / 2e-6, rel=1e-6, abs=1e-8)


def test_predict_points_single_point_and_grid_nodes():
    model = _model(4, 2)
    g = _grid(model, (3, 2), 5)
    P = g.points()
    for idx, p in zip(itertools.product(range(3), range(2)), P):
        assert predict_points(model, p)[0] == pytest.approx(predict_grid(model, g)[idx], abs=1e-15)


def test_model_validation():
    spec = MlpSpec(2, (3,), 2)
    lay = model_layout([spec, spec])
    pv = ParamVector(np.zeros(lay.size), lay)
    with pytest.raises(ValueError):
        AnantModel([spec, spec], pv, [[0, 1], [1, 2]])
    with pytest.raises(ValueError):
        AnantModel([spec], ParamVector(np.zeros(layout(spec).size), model_layout([spec])), [[0, 1]])
    with pytest.raises(ValueError):
        AnantModel([spec, MlpSpec(2, (3,), 3)], ParamVector(np.zeros(model_layout([spec, MlpSpec(2, (3,), 3)]).size), model_layout([spec, MlpSpec(2, (3,), 3)])), [[0, 1], [2, 3]])
    with pytest.raises(ValueError):
        AnantModel([spec, spec], pv, [[0, 1], [2, 3]], time_network=0)


def test_grid_rejects_foreign_active_dim():
    model = _model(6, 3)
    g = GridBatch((0, 1, 4), [[0.1]] * 3, (2, 3, 5), [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        predict_grid(model, g)
    with pytest.raises(ValueError):
        partial2_grid(model, _grid(model, (2, 2, 2), 0), 99)


@given(st.integers(0, 2**31 - 1), st.integers(2, 3))
@settings(max_examples=20, deadline=None)
def test_grid_equals_points_property(seed, B):
    model = _model(2 * B + 1, B, r=2, seed=seed % 1000)
    cfg = SamplerConfig(np.tile([-1.0, 1.0], (model.d, 1)), B, n_c=3)
    active = tuple(p[0] for p in model.partition)
    g = make_collocation_grid(cfg, active, np.random.default_rng(seed))
    assert np.allclose(predict_grid(model, g).reshape(-1), predict_points(model, g.points()), atol=1e-13)


def test_build_model_is_seeded():
    a, b = _model(6, 3, seed=4), _model(6, 3, seed=4)
    assert np.array_equal(a.params.values, b.params.values)
    assert not np.array_equal(a.params.values, _model(6, 3, seed=5).params.values)
