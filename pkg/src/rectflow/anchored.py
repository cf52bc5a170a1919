"""Guided sampling anchored to the unguided (omega = 1) trajectory.

For omega > 1 the guided Euler path drifts away from the omega = 1 path.
Each guided step is corrected by re-fitting the null embedding fed to the
unconditional branch so that the step lands on the matching state of the
omega = 1 pivot. Model weights and label embeddings stay frozen; each
trajectory optimises its own sequence of null embeddings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solver import euler_simulate
from .tensornet import Tensor
from .velocityfield import NULL, VelocityField


class AnchoringError(RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite anchoring residual at step {step}")


@dataclass
class AnchoredResult:
    embeddings: np.ndarray          # [T, n, E] optimised null embedding per step
    states: np.ndarray              # [T + 1, n, dim] guided path
    pivot: np.ndarray               # [T + 1, n, dim] omega = 1 path
    residuals: np.ndarray           # [T, n] best ||z* - z||^2 per step
    initial_residuals: np.ndarray   # [T, n] residual before any inner update
    iterations: np.ndarray          # [T, n] inner updates taken

    @property
    def z1(self) -> np.ndarray:
        return self.states[-1]

    @property
    def steps(self) -> int:
        return len(self.embeddings)


def anchored_generate(field: VelocityField, z0, labels, steps: int = 100, omega: float = 2.0,
                      inner: int = 10, eps: float | None = None, lr_embed: float = 1e-2,
                      method: str = "line_search") -> AnchoredResult:
    """Guided generation whose null embeddings track the omega = 1 pivot.

    ``method="line_search"`` takes steepest-descent steps on the embedding
    with an exact line search along the gradient (secant model of the
    residual); ``method="gd"`` takes plain steps of size ``lr_embed``.
    The best embedding seen in each step's inner loop is kept.
    """
    if omega < 1.0:
        raise ValueError("anchoring needs omega >= 1")
    if steps < 1:
        raise ValueError("need at least one step")
    if method not in ("line_search", "gd"):
        raise ValueError(f"unknown inner optimiser {method!r}")
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    n, dim = z0.shape
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
    if eps is None:
        eps = 1e-6 * dim

    pivot = euler_simulate(field, z0, labels, steps).states
    dt = 1.0 / steps
    E = field.embed_dim
    null_labels = np.full(n, NULL)
    emb = np.tile(field.cond.null.data, (n, 1))

    embeddings = np.empty((steps, n, E))
    states = np.empty((steps + 1, n, dim))
    states[0] = z0
    residuals = np.empty((steps, n))
    initial = np.empty((steps, n))
    iterations = np.zeros((steps, n), dtype=np.int64)

    z = z0
    with field.frozen():
        for k in range(steps):
            t = k / steps
            target = pivot[k + 1]
            cond = field.predict(z, t, labels)
            if omega == 1.0:
                z_next = z + dt * cond
                res = ((target - z_next) ** 2).sum(axis=1)
                embeddings[k], residuals[k], initial[k] = emb, res, res
                states[k + 1] = z = z_next
                continue
            base = z + dt * omega * cond
            scale = dt * (1.0 - omega)

            def land(e):
                return base + scale * field.predict(z, t, null_labels, e)

            best_e = emb.copy()
            best_z = land(best_e)
            best_r = ((target - best_z) ** 2).sum(axis=1)
            if not np.all(np.isfinite(best_r)):
                raise AnchoringError(k)
            initial[k] = best_r
            active = best_r >= eps
            damping = np.ones(n)
            for _ in range(inner):
                if not active.any():
                    break
                e_t = Tensor(best_e, requires_grad=True)
                v_null = field.velocity(z, t, null_labels, e_t)
                diff = Tensor(target - base) - v_null * scale
                diff.square().sum().backward()
                grad = e_t.grad
                if method == "gd":
                    cand = best_e - lr_embed * grad
                else:
                    r0 = target - best_z
                    probe = target - land(best_e - grad)
                    q = probe - r0
                    qq = (q * q).sum(axis=1)
                    alpha = np.where(qq > 0, -(r0 * q).sum(axis=1) / np.where(qq > 0, qq, 1.0), 0.0)
                    cand = best_e - (damping * alpha)[:, None] * grad
                cand = np.where(active[:, None], cand, best_e)
                cand_z = land(cand)
                cand_r = ((target - cand_z) ** 2).sum(axis=1)
                if not np.all(np.isfinite(cand_r)):
                    raise AnchoringError(k)
                iterations[k] += active
                better = active & (cand_r < best_r)
                best_e = np.where(better[:, None], cand, best_e)
                best_z = np.where(better[:, None], cand_z, best_z)
                best_r = np.where(better, cand_r, best_r)
                damping = np.where(better, 1.0, 0.5 * damping)
                active &= best_r >= eps
            embeddings[k] = best_e
            residuals[k] = best_r
            states[k + 1] = z = best_z
            emb = best_e
    return AnchoredResult(embeddings, states, pivot, residuals, initial, iterations)
