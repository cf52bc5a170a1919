"""Synthetic 2-D conditional targets and the Gaussian noise source."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TASKS = ("gauss8", "checkerboard", "moons2")


@dataclass(frozen=True)
class ToyTask:
    """A labelled 2-D mixture; the label plays the part of the text prompt.

    ``centers`` holds one anchor per label (mode centre, square centre or
    moon centre) and ``scale`` the per-mode spread.
    """

    name: str
    dim: int
    num_conditions: int
    centers: np.ndarray = field(repr=False)
    scale: float

    def __hash__(self):
        return hash((self.name, self.scale))

    def __eq__(self, other):
        return (isinstance(other, ToyTask) and self.name == other.name
                and self.scale == other.scale)

    def sample(self, rng, n, labels=None):
        return sample_data(self, rng, n, labels=labels)

    def density(self, points) -> np.ndarray:
        return gauss8_density(self, points)


def make_task(name: str = "gauss8", scale: float | None = None) -> ToyTask:
    if name == "gauss8":
        angles = 2 * math.pi * np.arange(8) / 8
        centers = 4.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return ToyTask("gauss8", 2, 8, centers, 0.15 if scale is None else float(scale))
    if name == "checkerboard":
        # 4x4 board over [-4, 4]^2; the 8 "dark" squares are the labels
        cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
        centers = np.array([[-3.0 + 2 * i, -3.0 + 2 * j] for i, j in cells])
        return ToyTask("checkerboard", 2, 8, centers, 2.0 if scale is None else float(scale))
    if name == "moons2":
        centers = np.array([[0.0, 0.0], [1.0, 0.5]])
        return ToyTask("moons2", 2, 2, centers, 0.1 if scale is None else float(scale))
    raise ValueError(f"unknown task {name!r}; expected one of {TASKS}")


def sample_data(task: ToyTask, rng: np.random.Generator, n: int,
                labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` points and their labels; ``labels`` pins the conditions."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if labels is None:
        labels = rng.integers(0, task.num_conditions, n)
    else:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,) or labels.min() < 0 or labels.max() >= task.num_conditions:
            raise ValueError("labels must be n ints in [0, num_conditions)")
    if task.name == "gauss8":
        points = task.centers[labels] + task.scale * rng.standard_normal((n, 2))
    elif task.name == "checkerboard":
        points = task.centers[labels] + task.scale * (rng.random((n, 2)) - 0.5)
    elif task.name == "moons2":
        theta = math.pi * rng.random(n)
        upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
        points = np.where((labels == 0)[:, None], upper, lower)
        points = 2.0 * (points - [0.5, 0.25]) + task.scale * rng.standard_normal((n, 2))
    else:
        raise ValueError(f"unknown task {task.name!r}")
    return points.astype(np.float64), labels.astype(np.int64)


def sample_noise(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.standard_normal((n, dim))


def gauss8_density(task: ToyTask, points, labels=None) -> np.ndarray:
    """Mixture density (or per-label density when ``labels`` is given)."""
    if task.name != "gauss8":
        raise ValueError("analytic density is only provided for gauss8")
    if task.scale <= 0:
        raise ValueError("degenerate mixture has no density")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    var = task.scale ** 2
    sq = ((pts[:, None, :] - task.centers[None]) ** 2).sum(-1)
    comp = np.exp(-0.5 * sq / var) / (2 * math.pi * var)
    if labels is not None:
        return comp[np.arange(len(pts)), np.asarray(labels)]
    return comp.mean(axis=1)
