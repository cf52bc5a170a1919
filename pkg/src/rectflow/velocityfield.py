"""Conditional velocity network v(z, t, c), its null embedding, and CFG."""
from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensornet import (ContractError, DimensionError, MlpNet, Tensor, concat,
                        read_checkpoint, write_checkpoint)

NULL = -1
STAGES = ("fm", "rf1", "rf2", "distilled", "debug")
TIME_FEATURES = 16
EMBED_DIM = 16


def time_embedding(t, n: int | None = None, width: int = TIME_FEATURES) -> np.ndarray:
    """Sinusoidal features of t, geometric frequencies 1..64 rad."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(1 if n is None else n, float(t))
    freqs = np.geomspace(1.0, 64.0, width // 2)
    phase = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


class ConditionEmbedding:
    """K learnable label vectors plus a separately stored null vector."""

    def __init__(self, num_conditions: int, width: int = EMBED_DIM, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.table = Tensor(rng.normal(0.0, 1.0, (num_conditions, width)), requires_grad=True)
        self.null = Tensor(rng.normal(0.0, 1.0, (width,)), requires_grad=True)

    @property
    def num_conditions(self) -> int:
        return self.table.shape[0]

    @property
    def width(self) -> int:
        return self.table.shape[1]

    def lookup(self, labels: np.ndarray, null: Tensor | None = None) -> Tensor:
        """Rows for ``labels``; entries equal to NULL take the null vector.

        ``null`` overrides the stored null vector, either one ``[E]`` vector
        or one row per sample ``[n, E]``.
        """
        labels = np.asarray(labels, dtype=np.int64)
        k = self.num_conditions
        if labels.size and (labels.max() >= k or labels.min() < NULL):
            raise ValueError(f"label out of range [0, {k})")
        is_null = labels == NULL
        if null is None or not is_null.any():
            stacked = concat([self.table, self.null.reshape(1, -1)], axis=0)
            return stacked.take_rows(np.where(is_null, k, labels))
        null = Tensor.lift(null)
        if null.data.ndim == 1:
            stacked = concat([self.table, null.reshape(1, -1)], axis=0)
            return stacked.take_rows(np.where(is_null, k, labels))
        if null.shape != (labels.size, self.width):
            raise DimensionError(f"per-sample null embeddings must be [{labels.size}, {self.width}]")
        if is_null.all():
            return null
        # mix: gather conditional rows then swap in per-row null vectors
        stacked = concat([self.table, null], axis=0)
        idx = np.where(is_null, k + np.arange(labels.size), labels)
        return stacked.take_rows(idx)

    def parameters(self) -> list[Tensor]:
        return [self.table, self.null]


class VelocityField:
    """MLP on ``[z | time features | condition embedding]``."""

    def __init__(self, dim: int = 2, num_conditions: int = 8, hidden: Sequence[int] = (128, 128, 128),
                 embed_dim: int = EMBED_DIM, activation: str = "silu", seed: int = 0,
                 stage: str = "fm"):
        self.dim = int(dim)
        self.stage = stage
        self.cond = ConditionEmbedding(num_conditions, embed_dim, seed=seed + 1)
        widths = [self.dim + TIME_FEATURES + embed_dim, *hidden, self.dim]
        self.net = MlpNet(widths, activation=activation, seed=seed)
        self.meta: dict = {}

    @property
    def num_conditions(self) -> int:
        return self.cond.num_conditions

    @property
    def embed_dim(self) -> int:
        return self.cond.width

    def parameters(self) -> list[Tensor]:
        return self.net.parameters() + self.cond.parameters()

    def named_blocks(self) -> list[tuple[str, Tensor]]:
        return self.net.named_parameters() + [("cond.table", self.cond.table), ("cond.null", self.cond.null)]

    def velocity(self, z, t, labels, null=None) -> Tensor:
        z = Tensor.lift(z)
        if z.data.ndim != 2 or z.shape[1] != self.dim:
            raise DimensionError(f"expected z of shape [n, {self.dim}], got {z.shape}")
        n = z.shape[0]
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
            raise ValueError("t must lie in [0, 1]")
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
        temb = Tensor(time_embedding(t_arr, n))
        if temb.shape[0] != n:
            raise DimensionError("t must be a scalar or one value per row")
        cemb = self.cond.lookup(labels, null)
        return self.net.forward(concat([z, temb, cemb], axis=1))

    __call__ = velocity

    def predict(self, z, t, labels, null=None) -> np.ndarray:
        return self.velocity(z, t, labels, null).data

    @contextlib.contextmanager
    def frozen(self):
        """Exclude the model's own parameters from the gradient tape."""
        params = self.parameters()
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    def zero_(self) -> "VelocityField":
        for p in self.net.parameters():
            p.data[...] = 0.0
        return self

    @classmethod
    def constant(cls, velocity, num_conditions: int = 8, **kwargs) -> "VelocityField":
        """Debug field returning ``velocity`` everywhere."""
        velocity = np.asarray(velocity, dtype=np.float64)
        field = cls(dim=velocity.size, num_conditions=num_conditions, stage="debug", **kwargs)
        field.zero_()
        field.net.biases[-1].data[...] = velocity
        return field

    def copy(self) -> "VelocityField":
        other = VelocityField.__new__(VelocityField)
        other.dim = self.dim
        other.stage = self.stage
        other.meta = dict(self.meta)
        other.net = MlpNet.__new__(MlpNet)
        other.net.widths = list(self.net.widths)
        other.net.activation = self.net.activation
        other.net.weights = [Tensor(w.data.copy(), True) for w in self.net.weights]
        other.net.biases = [Tensor(b.data.copy(), True) for b in self.net.biases]
        other.cond = ConditionEmbedding.__new__(ConditionEmbedding)
        other.cond.table = Tensor(self.cond.table.data.copy(), True)
        other.cond.null = Tensor(self.cond.null.data.copy(), True)
        return other

    # -- persistence ------------------------------------------------------------
    def save(self, path, **meta) -> str:
        info = dict(self.meta)
        info.update(meta)
        info.update(stage=self.stage, dim=self.dim, num_conditions=self.num_conditions,
                    embed_dim=self.embed_dim, time_features=TIME_FEATURES)
        blocks = [(name, t.data) for name, t in self.named_blocks()]
        write_checkpoint(path, self.net.widths, self.net.activation, blocks, info)
        return file_digest(path)

    @classmethod
    def load(cls, path) -> "VelocityField":
        widths, activation, blocks, meta = read_checkpoint(path)
        dim = int(meta["dim"])
        field = cls.__new__(cls)
        field.dim = dim
        field.stage = meta.get("stage", "fm")
        field.meta = {k: v for k, v in meta.items()
                      if k not in ("stage", "dim", "num_conditions", "embed_dim", "time_features")}
        field.net = MlpNet.__new__(MlpNet)
        field.net.widths = widths
        field.net.activation = activation
        layers = len(widths) - 1
        field.net.weights = [Tensor(blocks[f"layer{i}.weight"], True) for i in range(layers)]
        field.net.biases = [Tensor(blocks[f"layer{i}.bias"], True) for i in range(layers)]
        field.cond = ConditionEmbedding.__new__(ConditionEmbedding)
        field.cond.table = Tensor(blocks["cond.table"], True)
        field.cond.null = Tensor(blocks["cond.null"], True)
        if widths[0] != dim + TIME_FEATURES + field.cond.width or widths[-1] != dim:
            raise DimensionError(f"{path}: topology does not match dim={dim}")
        return field


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class GuidanceSpec:
    """Guidance scale plus optional per-step null embeddings.

    ``null_embeddings`` is ``[T, E]`` (shared across the batch) or
    ``[T, n, E]`` (one per trajectory).
    """

    omega: float = 1.0
    null_embeddings: np.ndarray | None = None

    def __post_init__(self):
        if self.omega < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.null_embeddings is not None:
            self.null_embeddings = np.asarray(self.null_embeddings, dtype=np.float64)

    @property
    def steps(self) -> int | None:
        return None if self.null_embeddings is None else len(self.null_embeddings)

    def null_for(self, step_index: int | None):
        if self.null_embeddings is None:
            return None
        if step_index is None or not 0 <= step_index < len(self.null_embeddings):
            raise ContractError(f"no null embedding for step {step_index}")
        return self.null_embeddings[step_index]


def eval_velocity(field: VelocityField, z, t, labels, null=None) -> Tensor:
    return field.velocity(z, t, labels, null)


def eval_cfg(field: VelocityField, spec: GuidanceSpec, z, t, labels, step_index=None,
             null=None) -> Tensor:
    """``omega * v(z, t, c) + (1 - omega) * v(z, t, null)``.

    The null input is ``null`` if given, else the spec's embedding for
    ``step_index``, else the field's learned null vector. At omega == 1 the
    conditional velocity is returned unchanged.
    """
    cond = field.velocity(z, t, labels)
    if spec.omega == 1.0:
        return cond
    if null is None:
        null = spec.null_for(step_index) if spec.null_embeddings is not None else None
    n = cond.shape[0]
    uncond = field.velocity(z, t, np.full(n, NULL), null)
    return cond * spec.omega + uncond * (1.0 - spec.omega)
