"""Rectified-flow toolkit for 2-D toy data.

Flow matching, one reflow round, guided coupling generation with anchored
null embeddings and one-step distillation, on a small numpy autodiff core.
"""

__version__ = "0.1.0"

from .anchored import AnchoredResult, anchored_generate
from .config import load_config
from .coupling import CouplingSet, generate_couplings, immiscible_assign
from .evalharness import EvalReport, energy_distance, wasserstein2
from .pipeline import Manifest, run_pipeline, run_stage
from .solver import Trajectory, euler_simulate, straightness
from .timesamplers import LogitNormal, MixExp, Uniform
from .toydata import make_task, sample_data
from .training import TrainConfig, train_stage
from .velocityfield import GuidanceSpec, VelocityField

__all__ = [
    "AnchoredResult", "CouplingSet", "EvalReport", "GuidanceSpec", "LogitNormal", "Manifest", "MixExp",
    "TrainConfig", "Trajectory", "Uniform", "VelocityField", "anchored_generate", "energy_distance",
    "euler_simulate", "generate_couplings", "immiscible_assign", "load_config", "make_task", "run_pipeline",
    "run_stage", "sample_data", "straightness", "train_stage", "wasserstein2",
]
