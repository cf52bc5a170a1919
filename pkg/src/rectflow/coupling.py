"""Noise/data pairing: batch assignment and stored coupling sets."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .anchored import anchored_generate
from .solver import DivergenceError, euler_simulate
from .tensornet import FormatError, _Reader, decode_metadata, encode_metadata
from .toydata import sample_noise
from .velocityfield import GuidanceSpec, VelocityField


class GenerationError(RuntimeError):
    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"coupling record {index}: {message}")


def pairwise_cost(z1, z0) -> np.ndarray:
    """Squared Euclidean distances, entry (i, j) = ||z1[i] - z0[j]||^2."""
    z1 = np.asarray(z1, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    if z1.ndim != 2 or z0.ndim != 2 or z1.shape != z0.shape:
        raise ValueError(f"batches must share shape [n, d]; got {z1.shape} and {z0.shape}")
    diff = z1[:, None, :] - z0[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


@dataclass
class Assignment:
    """``perm[i]`` is the noise row paired with data row ``i``."""

    perm: np.ndarray
    cost: float

    def apply(self, z0) -> np.ndarray:
        return np.asarray(z0)[self.perm]


def assign_cost_matrix(cost: np.ndarray) -> Assignment:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("assignment needs a square cost matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(rows), dtype=np.int64)
    perm[rows] = cols
    return Assignment(perm, float(cost[np.arange(len(perm)), perm].sum()))


def immiscible_assign(z1, z0) -> Assignment:
    """Re-pair noise to data so the summed squared distance is minimal."""
    return assign_cost_matrix(pairwise_cost(z1, z0))


def grouped_assign(z1, z0, groups) -> Assignment:
    """Optimal re-pairing restricted to rows that share a group id.

    With conditional data the noise is only exchanged among samples of the
    same label, so the noise seen by each label stays i.i.d. Gaussian.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    z0 = np.asarray(z0, dtype=np.float64)
    groups = np.asarray(groups)
    if z1.shape != z0.shape or groups.shape != (len(z1),):
        raise ValueError("z1, z0 and groups must describe the same rows")
    perm = np.arange(len(z1))
    total = 0.0
    for g in np.unique(groups):
        rows = np.flatnonzero(groups == g)
        sub = immiscible_assign(z1[rows], z0[rows])
        perm[rows] = rows[sub.perm]
        total += sub.cost
    return Assignment(perm, total)


def interpolate(z0, z1, t) -> np.ndarray:
    """z_t = (1 - t) z0 + t z1, with ``t`` scalar or one value per row."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch {z0.shape} vs {z1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and z0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * z0 + t * z1


# -- coupling sets -------------------------------------------------------------

COUPLING_MAGIC = b"RFCPL"
COUPLING_VERSION = 1


@dataclass
class CouplingSet:
    z0: np.ndarray
    z1: np.ndarray
    labels: np.ndarray
    num_conditions: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=np.float64)
        self.z1 = np.asarray(self.z1, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.z0.shape != self.z1.shape or self.z0.ndim != 2:
            raise ValueError("z0 and z1 must both be [count, dim]")
        if self.labels.shape != (len(self.z0),):
            raise ValueError("one label per record required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_conditions):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.z0)

    @property
    def dim(self) -> int:
        return self.z0.shape[1]

    def batch(self, index) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.z0[index], self.z1[index], self.labels[index]

    def save(self, path) -> None:
        """Layout, little-endian: b"RFCPL", version u32, dim u32, count u64,
        cond-count u32, metadata length u32 + UTF-8 ``key=value`` lines, then
        per record z0 (dim f64), z1 (dim f64), label u32."""
        count, dim = len(self), self.dim
        meta = encode_metadata(self.meta).encode("utf-8")
        head = (COUPLING_MAGIC + struct.pack("<IIQI", COUPLING_VERSION, dim, count, self.num_conditions)
                + struct.pack("<I", len(meta)) + meta)
        rec = np.dtype([("z0", "<f8", (dim,)), ("z1", "<f8", (dim,)), ("label", "<u4")])
        body = np.empty(count, dtype=rec)
        body["z0"] = self.z0
        body["z1"] = self.z1
        body["label"] = self.labels
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(body.tobytes())

    @classmethod
    def load(cls, path) -> "CouplingSet":
        with open(path, "rb") as fh:
            reader = _Reader(fh.read())
        if reader.take(5) != COUPLING_MAGIC:
            raise FormatError(f"{path}: not a coupling file")
        version = reader.u32()
        if version != COUPLING_VERSION:
            raise FormatError(f"{path}: unsupported coupling version {version}")
        dim = reader.u32()
        count = reader.u64()
        k = reader.u32()
        meta = decode_metadata(reader.string())
        rec = np.dtype([("z0", "<f8", (dim,)), ("z1", "<f8", (dim,)), ("label", "<u4")])
        body = np.frombuffer(reader.take(rec.itemsize * count), dtype=rec)
        if reader.pos != len(reader.raw):
            raise FormatError(f"{path}: trailing bytes")
        return cls(body["z0"].reshape(count, dim).copy(), body["z1"].reshape(count, dim).copy(),
                   body["label"].astype(np.int64), k, meta)


def generate_couplings(model: VelocityField, n: int, steps: int = 100, omega: float = 1.0,
                       anchored: bool = False, seed: int = 0, shard_size: int = 2048,
                       inner: int = 10, eps: float | None = None, lr_embed: float = 1e-2,
                       method: str = "line_search", model_id: str = "") -> CouplingSet:
    """Simulate ``n`` (noise, sample, label) records from ``model``.

    Noise and labels for shard ``s`` come from ``default_rng([seed, s])`` so
    shards are independent and the set is fully determined by the metadata.
    """
    if steps < 1:
        raise ValueError("need at least one solver step")
    k = model.num_conditions
    z0_parts, z1_parts, lab_parts = [], [], []
    for shard, start in enumerate(range(0, n, shard_size)):
        m = min(shard_size, n - start)
        rng = np.random.default_rng([seed, shard])
        z0 = sample_noise(rng, m, model.dim)
        labels = rng.integers(0, k, m)
        try:
            if anchored and omega != 1.0:
                z1 = anchored_generate(model, z0, labels, steps, omega, inner=inner, eps=eps,
                                       lr_embed=lr_embed, method=method).z1
            else:
                guidance = GuidanceSpec(omega) if omega != 1.0 else None
                z1 = euler_simulate(model, z0, labels, steps, guidance=guidance, record=False)
        except (DivergenceError, RuntimeError) as err:
            bad = _first_bad_row(model, z0, labels, steps, omega)
            raise GenerationError(start + bad, str(err)) from err
        if not np.all(np.isfinite(z1)):
            bad = int(np.argmax(~np.isfinite(z1).all(axis=1)))
            raise GenerationError(start + bad, "non-finite sample")
        z0_parts.append(z0)
        z1_parts.append(z1)
        lab_parts.append(labels)
    meta = {"model_id": model_id or model.meta.get("model_id", ""), "omega": omega, "steps": steps,
            "anchored": int(bool(anchored)), "seed": seed, "count": n, "shard_size": shard_size,
            "inner": inner, "eps": "" if eps is None else eps, "lr_embed": lr_embed, "method": method,
            "stage": model.stage}
    if n == 0:
        empty = np.zeros((0, model.dim))
        return CouplingSet(empty, empty.copy(), np.zeros(0, np.int64), k, meta)
    return CouplingSet(np.concatenate(z0_parts), np.concatenate(z1_parts), np.concatenate(lab_parts), k, meta)


def _first_bad_row(model, z0, labels, steps, omega) -> int:
    guidance = GuidanceSpec(omega) if omega != 1.0 else None
    for i in range(len(z0)):
        try:
            euler_simulate(model, z0[i:i + 1], labels[i:i + 1], steps, guidance=guidance, record=False)
        except DivergenceError:
            return i
    return 0


def regenerate(meta: dict, model: VelocityField) -> CouplingSet:
    """Rebuild a coupling set from its stored metadata."""
    eps = meta.get("eps", "")
    return generate_couplings(model, int(meta["count"]), int(meta["steps"]), float(meta["omega"]),
                              bool(int(meta["anchored"])), int(meta["seed"]), int(meta["shard_size"]),
                              int(meta["inner"]), None if eps in ("", None) else float(eps),
                              float(meta["lr_embed"]), meta.get("method", "line_search"),
                              meta.get("model_id", ""))
