"""On-disk run configuration (YAML), overrides, hashing and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .ansatz import AnantModel, model_layout
from .bodynet import KanSpec, MlpSpec, ParamVector, spec_from_dict
from .pde import ProblemSpec, ResidualConfig
from .sampling import SamplerConfig, partition_dimensions
from .train import Stage, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ProblemSection:
    name: str = ""
    d: int = 0
    box: list = field(default_factory=lambda: [-1.0, 1.0])
    transient: bool | None = None
    T: float = 1.0
    residual_scaling: str = "as_written"


@dataclass
class ModelSection:
    B: int = 3
    kind: str = "mlp"
    widths: list = field(default_factory=lambda: [64, 64])
    r: int = 10
    activation: str = "tanh"
    adaptive: bool = False
    scale_n: float = 1.0
    basis: str = "spline"
    k: int = 2
    G: int = 5
    time_widths: list | None = None


@dataclass
class SamplingSection:
    N_C: int = 14
    num_collocation_grids: int = 14
    N_B: int = 6
    num_boundary_grids: int = 32
    num_initial_grids: int = 0
    seed: int = 0
    axis_mode: str = "random"


def _default_stages():
    return [
        {"optimizer": "adamw", "learning_rate": 1e-3, "iterations": 20000, "sampling_frequency": 1000},
        {"optimizer": "lbfgs", "learning_rate": 1e-2, "iterations": 5000, "sampling_frequency": 1000},
    ]


@dataclass
class TrainSection:
    stages: list = field(default_factory=_default_stages)
    lambda_r: float = 1.0
    lambda_b: float = 15.0
    seed: int = 0
    reduction: str = "mean"


@dataclass
class EvalSection:
    n_test: int = 10_000
    n_seeds: int = 10
    test_seed: int = 12345
    slice_resolution: int = 50
    slice_triples: list | None = None


SECTIONS = {
    "problem": ProblemSection,
    "model": ModelSection,
    "sampling": SamplingSection,
    "train": TrainSection,
    "eval": EvalSection,
}
STAGE_KEYS = {f.name for f in fields(Stage)}


@dataclass
class RunConfig:
    problem: ProblemSection
    model: ModelSection = field(default_factory=ModelSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a mapping of sections")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
        parts = {}
        for name, klass in SECTIONS.items():
            body = doc.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(f"section [{name}] must be a mapping")
            allowed = {f.name for f in fields(klass)}
            bad = set(body) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
            parts[name] = klass(**copy.deepcopy(body))
        for key in ("name", "d"):
            if key not in (doc.get("problem") or {}):
                raise ConfigError(f"missing required field problem.{key}")
        run = cls(**parts)
        run.validate()
        return run

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def validate(self) -> None:
        for i, st in enumerate(self.train.stages):
            if not isinstance(st, dict):
                raise ConfigError(f"train.stages[{i}] must be a mapping")
            bad = set(st) - STAGE_KEYS
            if bad:
                raise ConfigError(f"unknown key(s) in train.stages[{i}]: {', '.join(sorted(bad))}")
        if self.model.kind not in ("mlp", "kan"):
            raise ConfigError(f"model.kind must be 'mlp' or 'kan', got {self.model.kind!r}")
        try:
            self.to_train_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    # -- derived objects ----------------------------------------------------

    def problem_spec(self) -> ProblemSpec:
        p = self.problem
        spec = ProblemSpec(p.name, int(p.d), tuple(p.box), float(p.T))
        if p.transient is not None and bool(p.transient) != spec.transient:
            raise ConfigError(f"problem.transient={p.transient} contradicts problem {p.name!r}")
        return spec

    def partition(self) -> list[list[int]]:
        pr = self.problem_spec()
        return partition_dimensions(pr.n_coords, self.model.B, pr.time_coord)

    def body_specs(self) -> tuple:
        m, pr = self.model, self.problem_spec()
        specs = []
        for i, part in enumerate(self.partition()):
            widths = m.widths
            if pr.transient and i == 0 and m.time_widths is not None:
                widths = m.time_widths
            if m.kind == "mlp":
                specs.append(MlpSpec(len(part), tuple(widths), m.r, m.activation, bool(m.adaptive), float(m.scale_n)))
            else:
                specs.append(KanSpec(len(part), tuple(widths), m.r, m.basis, int(m.k), int(m.G)))
        return tuple(specs)

    def sampler_config(self) -> SamplerConfig:
        s, pr = self.sampling, self.problem_spec()
        return SamplerConfig(
            pr.bounds(),
            self.model.B,
            n_c=int(s.N_C),
            num_collocation_grids=int(s.num_collocation_grids),
            n_b=int(s.N_B),
            num_boundary_grids=int(s.num_boundary_grids),
            num_initial_grids=int(s.num_initial_grids),
            seed=int(s.seed),
            axis_mode=s.axis_mode,
            time_dim=pr.time_coord,
        )

    def to_train_config(self) -> TrainConfig:
        t = self.train
        stages = tuple(Stage(**st) for st in t.stages)
        return TrainConfig(
            self.problem_spec(),
            self.sampler_config(),
            self.body_specs(),
            stages,
            rcfg=ResidualConfig(self.problem.residual_scaling),
            lambda_r=float(t.lambda_r),
            lambda_b=float(t.lambda_b),
            seed=int(t.seed),
            reduction=t.reduction,
        )

    def with_seed(self, seed: int) -> "RunConfig":
        doc = self.to_dict()
        doc["train"]["seed"] = int(seed)
        doc["sampling"]["seed"] = int(seed)
        return RunConfig.from_dict(doc)

    def config_hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(doc: dict) -> str:
    """sha256 of the canonical JSON form of a configuration."""
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def loads(text: str) -> RunConfig:
    return RunConfig.from_dict(yaml.safe_load(text) or {})


def dumps(run: RunConfig) -> str:
    return yaml.safe_dump(run.to_dict(), sort_keys=False)


def load(path) -> RunConfig:
    return loads(Path(path).read_text())


def dump(run: RunConfig, path) -> None:
    Path(path).write_text(dumps(run))


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("anantnet.presets").iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> RunConfig:
    path = resources.files("anantnet.presets") / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"no preset named {name!r}; available: {', '.join(preset_names())}")
    return loads(path.read_text())


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``section.key=value`` (or ``train.stages.0.iterations=5``) overrides.

    Values are parsed as YAML scalars/lists.
    """
    doc = copy.deepcopy(doc)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = doc
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                if p not in node:
                    raise ConfigError(f"unknown override path {key!r}")
                node = node[p]
        last = parts[-1]
        value = yaml.safe_load(raw)
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return doc


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: AnantModel, run_doc: dict | None = None) -> None:
    """``.npz`` holding the flat parameters and a JSON description of the model."""
    meta = {
        "specs": [s.to_dict() for s in model.specs],
        "partition": [list(p) for p in model.partition],
        "time_network": model.time_network,
        "config": run_doc,
        "config_hash": config_hash(run_doc) if run_doc is not None else None,
    }
    with open(path, "wb") as fh:
        np.savez(fh, params=model.params.values, meta=np.array(json.dumps(meta)))


def load_checkpoint(path) -> tuple[AnantModel, dict]:
    with np.load(path, allow_pickle=False) as z:
        params = z["params"].copy()
        meta = json.loads(str(z["meta"]))
    specs = tuple(spec_from_dict(s) for s in meta["specs"])
    model = AnantModel(specs, ParamVector(params, model_layout(specs)), meta["partition"], meta["time_network"])
    return model, meta
