"""Euler integration of the flow ODE and the straightness statistic."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .velocityfield import GuidanceSpec, VelocityField, eval_cfg


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at Euler step {step}")


@dataclass
class Trajectory:
    """Batched Euler path: ``states[k]`` is z at t = k / T."""

    states: np.ndarray       # [T + 1, n, dim]
    velocities: np.ndarray   # [T, n, dim]
    timesteps: np.ndarray    # [T]

    @property
    def steps(self) -> int:
        return len(self.timesteps)

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @property
    def start(self) -> np.ndarray:
        return self.states[0]

    @property
    def end(self) -> np.ndarray:
        return self.states[-1]

    def translate(self, offset) -> "Trajectory":
        return Trajectory(self.states + np.asarray(offset), self.velocities.copy(), self.timesteps.copy())

    def select(self, index) -> "Trajectory":
        """Sub-batch by row index (kept as a batch of one) or slice."""
        if not isinstance(index, slice):
            index = slice(index, index + 1)
        return Trajectory(self.states[:, index], self.velocities[:, index], self.timesteps)


def velocity_function(field, labels, guidance: GuidanceSpec | None = None) -> Callable:
    """Wrap a field (optionally guided) as ``fn(z, t, step) -> ndarray``.

    Plain callables ``fn(z, t)`` pass through.
    """
    if isinstance(field, VelocityField):
        if guidance is None or guidance.omega == 1.0 and guidance.null_embeddings is None:
            return lambda z, t, k: field.predict(z, t, labels)
        return lambda z, t, k: eval_cfg(field, guidance, z, t, labels, step_index=k).data
    return lambda z, t, k: np.asarray(field(z, t), dtype=np.float64)


def euler_simulate(field, z0, labels=None, steps: int = 100, guidance: GuidanceSpec | None = None,
                   record: bool = True):
    """Integrate dz/dt = v(z, t) from t = 0 to 1 in ``steps`` equal steps.

    Returns a :class:`Trajectory` when ``record`` is set, otherwise just the
    final state.
    """
    steps = int(steps)
    if steps < 1:
        raise ValueError("need at least one Euler step")
    z = np.array(z0, dtype=np.float64)
    if z.ndim == 0:
        z = z.reshape(1, 1)
    elif z.ndim == 1:
        z = z[:, None] if not isinstance(field, VelocityField) else z[None, :]
    if not np.all(np.isfinite(z)):
        raise DivergenceError(0, "initial state is not finite")
    if labels is None:
        labels = np.zeros(len(z), dtype=np.int64)
    fn = velocity_function(field, labels, guidance)
    dt = 1.0 / steps
    timesteps = np.arange(steps) / steps
    if record:
        states = np.empty((steps + 1,) + z.shape)
        velocities = np.empty((steps,) + z.shape)
        states[0] = z
    for k in range(steps):
        v = fn(z, timesteps[k], k)
        z = z + dt * v
        if not np.all(np.isfinite(z)):
            raise DivergenceError(k)
        if record:
            velocities[k] = v
            states[k + 1] = z
    if record:
        return Trajectory(states, velocities, timesteps)
    return z


def straightness(traj: Trajectory) -> np.ndarray:
    """Per-trajectory S = mean_k ||(z1 - z0) - v_k||^2 (left Riemann sum)."""
    if traj.steps == 0:
        raise ValueError("empty trajectory")
    chord = traj.end - traj.start
    dev = ((chord[None] - traj.velocities) ** 2).sum(axis=-1)
    return dev.mean(axis=0)


@dataclass
class StraightnessReport:
    mean: float
    stderr: float
    log_mean: float
    count: int

    def as_dict(self) -> dict:
        return {"mean_S": self.mean, "stderr_S": self.stderr, "log_S": self.log_mean, "count": self.count}


def straightness_report(traj: Trajectory) -> StraightnessReport:
    values = straightness(traj)
    n = len(values)
    stderr = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    mean = float(values.mean())
    return StraightnessReport(mean, stderr, math.log(mean) if mean > 0 else -math.inf, n)


def write_trajectory_csv(traj: Trajectory, path, index: int = 0) -> None:
    """One trajectory per file. Rows: step, t, z components, v components
    (v empty on the final state)."""
    dim = traj.states.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t"] + [f"z{i}" for i in range(dim)] + [f"v{i}" for i in range(dim)])
        for k in range(traj.steps + 1):
            z = traj.states[k, index]
            if k < traj.steps:
                v = [repr(float(x)) for x in traj.velocities[k, index]]
                t = traj.timesteps[k]
            else:
                v = [""] * dim
                t = 1.0
            w.writerow([k, repr(float(t))] + [repr(float(x)) for x in z] + v)
