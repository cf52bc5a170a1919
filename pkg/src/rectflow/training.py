"""Regression objectives and the per-stage training loop.

All four stages regress the chord ``z1 - z0`` at ``z_t``:

* ``fm``: fresh noise/data pairs, uniform t.
* ``rf1``: fresh pairs re-matched per batch, logit-normal t.
* ``rf2``: stored (noise, simulated sample) pairs, Mix-Exp t.
* ``distill``: stored pairs at t = 0, i.e. one full Euler step.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import parse_bool, parse_list
from .coupling import CouplingSet, grouped_assign, immiscible_assign, interpolate
from .tensornet import Adam, DimensionError, Tensor
from .timesamplers import TimestepDistribution, Uniform, from_config
from .toydata import ToyTask, sample_data, sample_noise
from .velocityfield import NULL, VelocityField

STAGE_CODES = {"fm": 1, "rf1": 2, "rf2": 3, "distill": 4}
STAGE_TAGS = {"fm": "fm", "rf1": "rf1", "rf2": "rf2", "distill": "distilled"}


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, message: str):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


@dataclass
class TrainConfig:
    stage: str = "fm"
    iterations: int = 20000
    batch_size: int = 256
    sampler: TimestepDistribution = field(default_factory=Uniform)
    immiscible: bool = False
    immiscible_scope: str = "label"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    seed: int = 0
    cond_drop: float = 0.1
    hidden: tuple = (128, 128, 128)
    embed_dim: int = 16
    activation: str = "silu"
    ema_decay: float = 0.99

    def __post_init__(self):
        if self.stage not in STAGE_CODES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.cond_drop < 1:
            raise ValueError("cond_drop must be in [0, 1)")
        if self.immiscible_scope not in ("label", "batch"):
            raise ValueError("immiscible_scope must be 'label' or 'batch'")

    @property
    def uses_couplings(self) -> bool:
        return self.stage in ("rf2", "distill")

    @classmethod
    def from_sections(cls, cfg: dict, stage: str) -> "TrainConfig":
        sec = cfg[f"stage.{stage}"]
        opt = cfg["optim"]
        model = cfg["model"]
        sampler = Uniform() if stage == "distill" else from_config(sec)
        return cls(stage=stage, iterations=int(sec["iterations"]), batch_size=int(sec["batch_size"]),
                   sampler=sampler, immiscible=parse_bool(sec.get("immiscible", "false")),
                   immiscible_scope=sec.get("immiscible_scope", "label"),
                   lr=float(opt["lr"]), betas=(float(opt["beta1"]), float(opt["beta2"])),
                   weight_decay=float(opt["weight_decay"]), seed=int(cfg["run"]["seed"]),
                   cond_drop=float(sec.get("cond_drop", 0.0)),
                   hidden=tuple(parse_list(model["hidden"], int)), embed_dim=int(model["embed_dim"]),
                   activation=model.get("activation", "silu"))


@dataclass
class LossReport:
    iteration: int
    loss: float
    ema_loss: float
    seconds: float
    pair_cost: float = math.nan      # summed ||z1 - z0||^2 of the training pairs
    random_cost: float = math.nan    # same for the pairing as drawn

    def row(self) -> list:
        return [self.iteration, repr(self.loss), repr(self.ema_loss), f"{self.seconds:.6f}"]


METRIC_COLUMNS = ["iteration", "loss", "ema_loss", "seconds"]


# -- objectives --------------------------------------------------------------

def _chord_loss(field: VelocityField, z0, z1, t, labels) -> Tensor:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape or z0.ndim != 2:
        raise DimensionError(f"z0 {z0.shape} and z1 {z1.shape} must share shape [n, d]")
    if z0.shape[1] != field.dim:
        raise DimensionError(f"field dim {field.dim} does not match data dim {z0.shape[1]}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(z0),))
    zt = interpolate(z0, z1, t)
    diff = Tensor(z1 - z0) - field.velocity(zt, t, labels)
    return diff.square().sum() * (1.0 / len(z0))


def rf_loss(field: VelocityField, z0, z1, t, labels) -> Tensor:
    """Batch mean of ||(z1 - z0) - v(z_t, t, c)||^2."""
    return _chord_loss(field, z0, z1, t, labels)


def reflow_loss(field: VelocityField, z0, z1, t, labels) -> Tensor:
    """Chord regression on stored coupling pairs (same kernel as rf_loss)."""
    return _chord_loss(field, z0, z1, t, labels)


def distill_loss(field: VelocityField, z0, z1, labels) -> Tensor:
    """Batch mean of ||z1 - (z0 + v(z0, 0, c))||^2."""
    return _chord_loss(field, z0, z1, 0.0, labels)


# -- loop ------------------------------------------------------------------------

def new_field(cfg: TrainConfig, task: ToyTask) -> VelocityField:
    return VelocityField(task.dim, task.num_conditions, hidden=cfg.hidden, embed_dim=cfg.embed_dim,
                         activation=cfg.activation, seed=cfg.seed * 100 + STAGE_CODES[cfg.stage])


def train_stage(cfg: TrainConfig, task: ToyTask, init: VelocityField | None = None,
                couplings: CouplingSet | None = None, callback=None, log_every: int = 1, data=None):
    """Run one stage; returns ``(field, reports)``.

    ``callback(report)`` is called every ``log_every`` iterations and on the
    last one; those reports are also returned. ``data=(points, labels)``
    replaces the task sampler with draws (with replacement) from fixed rows.
    """
    if cfg.uses_couplings and couplings is None:
        raise ValueError(f"stage {cfg.stage} needs a coupling set")
    if couplings is not None and couplings.dim != task.dim:
        raise DimensionError("coupling dim does not match task dim")
    field = init.copy() if init is not None else new_field(cfg, task)
    field.stage = STAGE_TAGS[cfg.stage]
    rng = np.random.default_rng([cfg.seed, STAGE_CODES[cfg.stage]])
    params = field.parameters()
    opt = Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    B = cfg.batch_size
    ema = 0.0
    reports: list[LossReport] = []
    start = time.perf_counter()
    for it in range(1, cfg.iterations + 1):
        if cfg.uses_couplings:
            idx = rng.integers(0, len(couplings), B)
            z0, z1, labels = couplings.batch(idx)
        elif data is not None:
            idx = rng.integers(0, len(data[0]), B)
            z1, labels = data[0][idx], data[1][idx]
            z0 = sample_noise(rng, B, task.dim)
        else:
            z1, labels = sample_data(task, rng, B)
            z0 = sample_noise(rng, B, task.dim)
        random_cost = pair_cost = math.nan
        if cfg.immiscible:
            random_cost = float(((z1 - z0) ** 2).sum())
            if cfg.immiscible_scope == "label":
                assignment = grouped_assign(z1, z0, labels)
            else:
                assignment = immiscible_assign(z1, z0)
            z0 = assignment.apply(z0)
            pair_cost = assignment.cost
        if cfg.stage == "distill":
            t = np.zeros(B)
        else:
            t = cfg.sampler.sample(rng, B)
        if cfg.cond_drop > 0:
            labels = np.where(rng.random(B) < cfg.cond_drop, NULL, labels)
        opt.zero_grad()
        loss = _chord_loss(field, z0, z1, t, labels)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(it, "non-finite loss")
        loss.backward()
        opt.step()
        ema = cfg.ema_decay * ema + (1 - cfg.ema_decay) * value
        if it % log_every == 0 or it == cfg.iterations:
            report = LossReport(it, value, ema / (1 - cfg.ema_decay ** it), time.perf_counter() - start,
                                pair_cost, random_cost)
            reports.append(report)
            if callback is not None:
                callback(report)
    for p in params:
        p.grad = None
    return field, reports


def write_metrics(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in reports:
            w.writerow(r.row())
