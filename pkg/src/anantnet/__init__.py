"""Separable tensor-product neural solvers for high-dimensional PDEs."""

import os as _os

# must run before numpy loads its BLAS
if _os.environ.get("ANANTNET_NUM_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["ANANTNET_NUM_THREADS"])

from .ansatz import AnantModel, build_model, predict_grid, predict_points
from .bodynet import KanSpec, MlpSpec
from .pde import ProblemSpec, ResidualConfig
from .sampling import GridBatch, SamplerConfig, partition_dimensions, sweep_active

__version__ = "0.1.0"

__all__ = [
    "AnantModel",
    "GridBatch",
    "KanSpec",
    "MlpSpec",
    "ProblemSpec",
    "ResidualConfig",
    "SamplerConfig",
    "build_model",
    "partition_dimensions",
    "predict_grid",
    "predict_points",
    "sweep_active",
]
