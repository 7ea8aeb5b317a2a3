"""Command-line entry point: train, eval, study and slice subcommands."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as C
from .evaluate import (
    evaluate_model,
    multi_seed_eval,
    runtime_scaling_report,
    sensitivity_sweep,
    slice_error_export,
    write_summary,
    write_table,
)
from .train import TrainingDiverged, preconditioning_study, train

THREADS_ENV = "ANANTNET_NUM_THREADS"


class CliError(Exception):
    pass


def _resolve_config(args) -> C.RunConfig:
    """Config from ``--config`` (a YAML path or ``preset:NAME``) plus overrides and seed."""
    if not args.config:
        raise CliError("--config is required")
    src = args.config
    run = C.load_preset(src.split(":", 1)[1]) if src.startswith("preset:") else C.load(src)
    doc = C.apply_overrides(run.to_dict(), args.override)
    run = C.RunConfig.from_dict(doc)
    if getattr(args, "seed", None) is not None:
        run = run.with_seed(args.seed)
    return run


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    run = _resolve_config(args)
    out = _out_dir(args)
    h = run.config_hash()
    cfg = run.to_train_config()
    try:
        model, log = train(cfg)
    except TrainingDiverged as exc:
        exc.log.to_csv(out / "train_log.csv", f"config_hash={h} aborted")
        raise CliError(str(exc)) from exc
    C.save_checkpoint(out / "checkpoint.npz", model, run.to_dict())
    log.to_csv(out / "train_log.csv", f"config_hash={h}")
    ev = evaluate_model(model, cfg.problem, run.eval.n_test, run.eval.test_seed)
    metrics = {
        "rel_l2_percent": ev.rel_l2_percent,
        "n_test": ev.n_test,
        "final_total_loss": log.total_loss[-1],
        "final_data_loss": log.data_loss[-1],
        "final_residual_loss": log.residual_loss[-1],
        "iterations": len(log),
    }
    timers = {**log.phase_totals(), "wall_seconds": log.wall_seconds}
    write_summary(out / "summary.json", h, [cfg.seed], metrics, timers, {"config": run.to_dict()})
    print(f"rel_l2_percent={ev.rel_l2_percent:.9g} config_hash={h}")
    return 0


def _check_compatible(model, run: C.RunConfig) -> None:
    pr = run.problem_spec()
    if model.d != pr.n_coords:
        raise CliError(f"checkpoint/spec mismatch: checkpoint has {model.d} coordinates, config problem needs {pr.n_coords}")
    if [list(p) for p in model.partition] != run.partition() or tuple(model.specs) != run.body_specs():
        raise CliError("checkpoint/spec mismatch: body networks differ from the configuration")


def cmd_eval(args) -> int:
    out = _out_dir(args)
    if args.multi_seed:
        run = _resolve_config(args)
        h = run.config_hash()
        res = multi_seed_eval(run.to_train_config(), run.eval.n_seeds, run.eval.n_test)
        rows = [{"seed": s, "rel_l2_percent": e} for s, e in zip(res.seeds, res.per_seed)]
        write_table(out / "multi_seed.csv", rows, ["seed", "rel_l2_percent"], h)
        write_summary(out / "multi_seed.json", h, res.seeds, res.to_dict())
        print(f"mean={res.mean:.9g} std={res.std:.9g} config_hash={h}")
        return 0
    if not args.checkpoint:
        raise CliError("eval needs --checkpoint (or --multi-seed with --config)")
    model, meta = C.load_checkpoint(args.checkpoint)
    if args.config:
        run = _resolve_config(args)
    else:
        if meta.get("config") is None:
            raise CliError("checkpoint carries no configuration; pass --config")
        run = C.RunConfig.from_dict(C.apply_overrides(meta["config"], args.override))
    _check_compatible(model, run)
    h = run.config_hash()
    ev = evaluate_model(model, run.problem_spec(), run.eval.n_test, run.eval.test_seed)
    write_summary(out / "eval.json", h, [run.train.seed], ev.to_dict(), extra={"checkpoint": str(args.checkpoint)})
    print(f"rel_l2_percent={ev.rel_l2_percent:.9g} config_hash={h}")
    return 0


def _value_list(text: str) -> list:
    return [yaml.safe_load(v) for v in text.split(",") if v.strip()]


def cmd_study(args) -> int:
    run = _resolve_config(args)
    out = _out_dir(args)
    h = run.config_hash()
    if args.kind == "precond":
        try:
            res = preconditioning_study(run.to_train_config(), args.iterations, args.gd_lr, args.qn_lr)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        res.gd.to_csv(out / "precond_gd.csv", f"config_hash={h}")
        res.qn.to_csv(out / "precond_qn.csv", f"config_hash={h}")
        metrics = {"gd_final_loss": res.gd.total_loss[-1], "qn_final_loss": res.qn.total_loss[-1], "final_ratio": res.final_ratio}
        write_summary(out / "precond.json", h, [run.train.seed], metrics)
        print(f"final_ratio={res.final_ratio:.9g} config_hash={h}")
    elif args.kind == "sensitivity":
        if not args.axis or not args.values:
            raise CliError("sensitivity study needs --axis and --values")
        try:
            rows = sensitivity_sweep(run.to_train_config(), args.axis, _value_list(args.values), run.eval.n_test, run.eval.test_seed)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        write_table(out / f"sweep_{args.axis}.csv", rows, ["axis_value", "rel_l2_percent", "wall_seconds"], h)
        print(f"rows={len(rows)} config_hash={h}")
    else:
        dims = [int(v) for v in _value_list(args.dims)]
        base = run.to_dict()

        def cfg_for_d(d):
            doc = json.loads(json.dumps(base))
            doc["problem"]["d"] = d
            return C.RunConfig.from_dict(doc).to_train_config()

        rows = runtime_scaling_report(cfg_for_d, dims)
        write_table(out / "scaling.csv", rows, ["d", "iters_timed", "mean_iter_seconds", "std"], h)
        times = [r["mean_iter_seconds"] for r in rows]
        print(f"max_over_min={max(times) / min(times):.9g} config_hash={h}")
    return 0


def cmd_slice(args) -> int:
    if not args.checkpoint:
        raise CliError("slice needs --checkpoint")
    model, meta = C.load_checkpoint(args.checkpoint)
    if meta.get("config") is None and not args.config:
        raise CliError("checkpoint carries no configuration; pass --config")
    run = _resolve_config(args) if args.config else C.RunConfig.from_dict(C.apply_overrides(meta["config"], args.override))
    _check_compatible(model, run)
    out = _out_dir(args)
    h = run.config_hash()
    triples = [tuple(int(v) for v in t.split(",")) for t in args.triple] if args.triple else run.eval.slice_triples
    if not triples:
        # one coordinate from each of the first three networks
        triples = [tuple(p[0] for p in model.partition[:3])]
    resolution = args.resolution or run.eval.slice_resolution
    rng = np.random.default_rng(run.eval.test_seed)
    for t in triples:
        try:
            res = slice_error_export(model, run.problem_spec(), t, out / f"slice_{'_'.join(map(str, t))}.csv", resolution, seed=rng, config_hash=h)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        print(f"{res.path} max_abs_error={res.max_abs_error:.9g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anantnet", description="Separable tensor-product solvers for high-dimensional PDEs.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="YAML config path or preset:NAME")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override train and sampling seeds")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="e.g. train.stages.0.iterations=100")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint.npz written by train")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint, or run the multi-seed protocol")
    common(sp, checkpoint=True)
    sp.add_argument("--multi-seed", action="store_true", help="train eval.n_seeds models from --config and aggregate")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("study", help="preconditioning, sensitivity or runtime-scaling study")
    sp.add_argument("kind", choices=["precond", "sensitivity", "scaling"])
    common(sp)
    sp.add_argument("--axis", choices=["boundary_volume", "collocation_volume", "batch_size"])
    sp.add_argument("--values", help="comma-separated sweep values")
    sp.add_argument("--dims", default="6,30,60", help="comma-separated dimensions for the scaling study")
    sp.add_argument("--iterations", type=int, default=None, help="precond: iterations per optimizer")
    sp.add_argument("--gd-lr", type=float, default=1e-2)
    sp.add_argument("--qn-lr", type=float, default=1.0)
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("slice", help="export point-wise errors on 3D slices")
    common(sp, checkpoint=True)
    sp.add_argument("--triple", action="append", help="three coordinates p,q,r (repeatable)")
    sp.add_argument("--resolution", type=int, default=None)
    sp.set_defaults(func=cmd_slice)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, C.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
