"""Sample-quality metrics and the sweeps built on them."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .anchored import anchored_generate
from .coupling import assign_cost_matrix, pairwise_cost
from .solver import euler_simulate, straightness_report
from .toydata import ToyTask, sample_data, sample_noise
from .velocityfield import GuidanceSpec, VelocityField


def wasserstein2(a, b) -> float:
    """Exact empirical W2 between equal-size point sets."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"W2 needs equal-size sets, got {a.shape} and {b.shape}")
    if len(a) == 0:
        raise ValueError("empty point sets")
    cost = assign_cost_matrix(pairwise_cost(a, b)).cost
    return math.sqrt(max(cost, 0.0) / len(a))


def _mean_pair_distance(x, y) -> float:
    diff = x[:, None, :] - y[None, :, :]
    return float(np.sqrt(np.einsum("ijk,ijk->ij", diff, diff)).mean())


def energy_distance(a, b) -> float:
    """2 E|A - B| - E|A - A'| - E|B - B'| averaged over all ordered pairs."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if len(a) < 2 or len(b) < 2:
        raise ValueError("energy distance needs at least two points per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError("point sets differ in dimension")
    value = 2 * _mean_pair_distance(a, b) - _mean_pair_distance(a, a) - _mean_pair_distance(b, b)
    return max(value, 0.0)


def conditional_w2(samples, labels, reference, ref_labels) -> float:
    """W2 per label, averaged over labels present in both sets."""
    labels = np.asarray(labels)
    ref_labels = np.asarray(ref_labels)
    values = []
    for c in np.unique(labels):
        a = samples[labels == c]
        b = reference[ref_labels == c]
        if len(a) != len(b):
            raise ValueError(f"label {c}: {len(a)} samples vs {len(b)} references")
        values.append(wasserstein2(a, b))
    return float(np.mean(values))


@dataclass
class EvalReport:
    model_id: str = ""
    stage: str = ""
    seed: int = 0
    samples: int = 512
    repetitions: int = 10
    steps_list: list = field(default_factory=list)
    rows: list = field(default_factory=list)        # tidy per-repetition rows
    straightness: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        self.rows.append(row)

    def summary(self, kind: str, key: str = "w2", **match) -> dict:
        """Mean and standard error of ``key`` grouped by (T, omega, anchored)."""
        groups: dict = {}
        for row in self.rows:
            if row["kind"] != kind or any(row.get(k) != v for k, v in match.items()):
                continue
            groups.setdefault((row["T"], row["omega"], row["anchored"]), []).append(row[key])
        out = {}
        for gkey, vals in sorted(groups.items()):
            vals = np.asarray(vals)
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            out[gkey] = {"mean": float(vals.mean()), "stderr": se, "count": len(vals)}
        return out

    def mean(self, kind: str, T=None, omega=None, anchored=None, key: str = "w2") -> float:
        vals = [r[key] for r in self.rows if r["kind"] == kind
                and (T is None or r["T"] == T) and (omega is None or r["omega"] == omega)
                and (anchored is None or r["anchored"] == anchored)]
        if not vals:
            raise KeyError(f"no {kind} rows for T={T} omega={omega} anchored={anchored}")
        return float(np.mean(vals))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)

    def to_csv(self, path) -> None:
        cols = ["model", "stage", "kind", "T", "omega", "anchored", "repetition", "w2", "energy"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([self.model_id, self.stage, r["kind"], r["T"], r["omega"], int(r["anchored"]),
                            r["repetition"], repr(r["w2"]), repr(r.get("energy", math.nan))])

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path) as fh:
            return cls(**json.load(fh))


def _draw(task: ToyTask, n: int, seed: int, repetition: int, dim: int):
    """Shared noise, labels and reference data for one repetition."""
    rng = np.random.default_rng([seed, repetition])
    labels = rng.integers(0, task.num_conditions, n)
    z0 = sample_noise(rng, n, dim)
    reference, _ = sample_data(task, rng, n, labels=labels)
    return z0, labels, reference


def few_step_sweep(field: VelocityField, task: ToyTask, steps_list=(1, 2, 4, 8, 16), n: int = 512,
                   repetitions: int = 10, seed: int = 1000, report: EvalReport | None = None,
                   energy: bool = True) -> EvalReport:
    """W2 (and energy distance) of T-step Euler samples against fresh data."""
    report = report or EvalReport(samples=n, repetitions=repetitions, seed=seed, stage=field.stage)
    report.steps_list = list(steps_list)
    for rep in range(repetitions):
        z0, labels, reference = _draw(task, n, seed, rep, field.dim)
        for T in steps_list:
            z1 = euler_simulate(field, z0, labels, T, record=False)
            report.add(kind="few_step", T=int(T), omega=1.0, anchored=False, repetition=rep,
                       w2=conditional_w2(z1, labels, reference, labels),
                       energy=energy_distance(z1, reference) if energy else math.nan)
    return report


def cfg_sweep(field: VelocityField, task: ToyTask, omegas=(1.0, 1.5, 2.0, 3.0), steps: int = 100,
              n: int = 512, repetitions: int = 10, seed: int = 1000, anchored=(False, True),
              report: EvalReport | None = None, anchor_kwargs: dict | None = None) -> EvalReport:
    """W2 of guided samples, plain and anchored, for each guidance scale."""
    report = report or EvalReport(samples=n, repetitions=repetitions, seed=seed, stage=field.stage)
    anchor_kwargs = anchor_kwargs or {}
    for rep in range(repetitions):
        z0, labels, reference = _draw(task, n, seed, rep, field.dim)
        for omega in omegas:
            omega = float(omega)
            for use_anchor in anchored:
                if use_anchor and omega >= 1.0:
                    z1 = anchored_generate(field, z0, labels, steps, omega, **anchor_kwargs).z1
                else:
                    guidance = GuidanceSpec(omega) if omega != 1.0 else None
                    z1 = euler_simulate(field, z0, labels, steps, guidance=guidance, record=False)
                report.add(kind="cfg", T=int(steps), omega=omega, anchored=bool(use_anchor), repetition=rep,
                           w2=conditional_w2(z1, labels, reference, labels),
                           energy=energy_distance(z1, reference))
    return report


def straightness_eval(field: VelocityField, task: ToyTask, n: int = 512, steps: int = 100,
                      seed: int = 1000) -> dict:
    rng = np.random.default_rng([seed, 99991])
    labels = rng.integers(0, task.num_conditions, n)
    z0 = sample_noise(rng, n, field.dim)
    traj = euler_simulate(field, z0, labels, steps)
    return straightness_report(traj).as_dict()
