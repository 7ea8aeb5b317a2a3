import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anantnet import config as C
from anantnet.ansatz import predict_points
from anantnet.cli import main
from anantnet.train import train

TOY = """
problem: {name: poisson, d: 6}
model: {B: 3, widths: [6], r: 3}
sampling: {N_C: 4, num_collocation_grids: 2, N_B: 3, num_boundary_grids: 3}
train:
  stages:
    - {optimizer: adamw, learning_rate: 0.01, iterations: 12, sampling_frequency: 6}
eval: {n_test: 300, n_seeds: 2, slice_resolution: 4}
"""


@pytest.fixture
def toy(tmp_path):
    p = tmp_path / "toy.yaml"
    p.write_text(TOY)
    return p


def test_parse_serialize_parse_identity():
    run = C.loads(TOY)
    again = C.loads(C.dumps(run))
    assert again == run
    assert again.config_hash() == run.config_hash()


@pytest.mark.parametrize("name", C.preset_names())
def test_presets_load_and_roundtrip(name):
    run = C.load_preset(name)
    assert C.loads(C.dumps(run)) == run
    cfg = run.to_train_config()
    assert cfg.sampler.d == cfg.problem.n_coords


def test_preset_point_counts():
    sc = C.load_preset("poisson_21d").sampler_config()
    assert sc.total_collocation_points() == 38416 and sc.total_boundary_points() == 6912
    heat = C.load_preset("heat_20d").sampler_config()
    assert heat.total_initial_points() == 50000


def test_missing_required_field():
    with pytest.raises(C.ConfigError, match="problem.d"):
        C.loads("problem: {name: poisson}")


@pytest.mark.parametrize(
    "text",
    [
        "problem: {name: poisson, d: 6}\nfoo: {}",
        "problem: {name: poisson, d: 6, colour: red}",
        "problem: {name: poisson, d: 6}\nmodel: {kind: cnn}",
        "problem: {name: poisson, d: 6, transient: true}",
        "problem: {name: poisson, d: 6}\ntrain: {stages: [{optimizer: adamw, iters: 3}]}",
        "problem: {name: poisson, d: 2}",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(C.ConfigError):
        C.loads(text)


def test_overrides():
    doc = C.apply_overrides(C.loads(TOY).to_dict(), ["train.stages.0.iterations=5", "model.widths=[4, 4]", "sampling.seed=9"])
    run = C.RunConfig.from_dict(doc)
    assert run.train.stages[0]["iterations"] == 5 and run.model.widths == [4, 4] and run.sampling.seed == 9
    with pytest.raises(C.ConfigError):
        C.apply_overrides(doc, ["nope.x=1"])
    with pytest.raises(C.ConfigError):
        C.apply_overrides(doc, ["no_equals_sign"])


@given(st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_hash_depends_on_seed(seed):
    run = C.loads(TOY)
    assert (run.with_seed(seed).config_hash() == run.config_hash()) == (seed == 0)


def test_checkpoint_roundtrip(tmp_path):
    run = C.loads(TOY)
    model, _ = train(run.to_train_config())
    C.save_checkpoint(tmp_path / "ck.npz", model, run.to_dict())
    loaded, meta = C.load_checkpoint(tmp_path / "ck.npz")
    X = np.random.default_rng(0).uniform(-1, 1, (50, 6))
    assert np.array_equal(predict_points(model, X), predict_points(loaded, X))
    assert meta["config_hash"] == run.config_hash()


# ---------------------------------------------------------------------------
# CLI


def test_cli_train_outputs_and_determinism(toy, tmp_path, capsys):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(toy), "--out", str(out1)]) == 0
    assert main(["train", "--config", str(toy), "--out", str(out2)]) == 0
    for f in ("checkpoint.npz", "train_log.csv", "summary.json"):
        assert (out1 / f).is_file()
    s1 = json.loads((out1 / "summary.json").read_text())
    s2 = json.loads((out2 / "summary.json").read_text())
    assert s1["metrics"] == s2["metrics"]
    assert s1["config_hash"] == C.load(toy).config_hash()
    # the training log round-trips to the stored final losses
    log = np.loadtxt(out1 / "train_log.csv", delimiter=",", skiprows=2)
    assert log[-1, 4] == s1["metrics"]["final_total_loss"]
    assert len(log) == s1["metrics"]["iterations"]


def test_cli_missing_field(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("problem: {name: poisson}\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) != 0
    assert "problem.d" in capsys.readouterr().err


def test_cli_eval_and_slice(toy, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(toy), "--out", str(out)]) == 0
    ck = str(out / "checkpoint.npz")
    assert main(["eval", "--checkpoint", ck, "--out", str(tmp_path / "ev")]) == 0
    ev = json.loads((tmp_path / "ev" / "eval.json").read_text())
    tr = json.loads((out / "summary.json").read_text())
    assert ev["metrics"]["rel_l2_percent"] == tr["metrics"]["rel_l2_percent"]
    assert main(["slice", "--checkpoint", ck, "--out", str(tmp_path / "sl"), "--triple", "0,2,4"]) == 0
    assert (tmp_path / "sl" / "slice_0_2_4.csv").is_file()
    assert main(["slice", "--checkpoint", ck, "--out", str(tmp_path / "sl"), "--triple", "0,1,4"]) == 1


def test_cli_eval_dimension_mismatch(toy, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(toy), "--out", str(out)])
    code = main(["eval", "--checkpoint", str(out / "checkpoint.npz"), "--config", str(toy), "--override", "problem.d=9", "--out", str(tmp_path / "e")])
    assert code != 0
    assert "mismatch" in capsys.readouterr().err


def test_cli_multi_seed(toy, tmp_path):
    assert main(["eval", "--multi-seed", "--config", str(toy), "--out", str(tmp_path / "ms")]) == 0
    doc = json.loads((tmp_path / "ms" / "multi_seed.json").read_text())
    assert doc["seeds"] == [0, 1] and doc["metrics"]["std"] > 0
    rows = np.loadtxt(tmp_path / "ms" / "multi_seed.csv", delimiter=",", skiprows=2)
    assert np.mean(rows[:, 1]) == doc["metrics"]["mean"]


def test_cli_study_precond_rejects_nonlinear(toy, tmp_path, capsys):
    assert main(["study", "precond", "--config", str(toy), "--out", str(tmp_path / "p")]) != 0
    assert "identity" in capsys.readouterr().err


def test_cli_study_precond_linear(toy, tmp_path):
    args = ["study", "precond", "--config", str(toy), "--out", str(tmp_path / "p"), "--override", "model.activation=identity", "--iterations", "5"]
    assert main(args) == 0
    doc = json.loads((tmp_path / "p" / "precond.json").read_text())
    assert doc["metrics"]["final_ratio"] == doc["metrics"]["qn_final_loss"] / doc["metrics"]["gd_final_loss"]


def test_cli_study_sensitivity_and_scaling(toy, tmp_path):
    assert main(["study", "sensitivity", "--config", str(toy), "--out", str(tmp_path / "s"), "--axis", "collocation_volume", "--values", "3,4"]) == 0
    rows = np.loadtxt(tmp_path / "s" / "sweep_collocation_volume.csv", delimiter=",", skiprows=2)
    assert rows.shape == (2, 3)
    assert main(["study", "scaling", "--config", str(toy), "--out", str(tmp_path / "c"), "--dims", "6,9"]) == 0
    rows = np.loadtxt(tmp_path / "c" / "scaling.csv", delimiter=",", skiprows=2)
    assert rows[:, 0].tolist() == [6, 9]
    assert main(["study", "sensitivity", "--config", str(toy), "--out", str(tmp_path / "s")]) == 1


def test_cli_preset_and_unknown_preset(tmp_path, capsys):
    assert main(["train", "--config", "preset:nope", "--out", str(tmp_path / "x")]) == 1
    assert "no preset" in capsys.readouterr().err
