"""Training-time distributions over t in (0, 1).

``LogitNormal`` puts mass on the middle of the path and is used for the
first rectified flow; ``MixExp`` puts mass on both ends and is used for
reflow. ``MixExp`` is centred on t = 1/2:

    p(t) = [exp(a (t - 1/2)) + exp(-a (t - 1/2))] / ((4 / a) sinh(a / 2))

``MixExp(centered=False)`` gives the uncentred ``exp(a t) + exp(-a t)``
variant, normalised by ``2 sinh(a) / a``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit, ndtr

EDGE = 1e-12


class DomainError(ValueError):
    pass


class ParameterError(ValueError):
    pass


def _check_open(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~(arr > 0.0)) or np.any(~(arr < 1.0)):
        raise DomainError("pdf is defined on the open interval (0, 1)")
    return arr


def _check_closed(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~(arr >= 0.0)) or np.any(~(arr <= 1.0)):
        raise DomainError("cdf is defined on [0, 1]")
    return arr


def _out(arr, like):
    return float(arr) if np.ndim(like) == 0 else arr


class TimestepDistribution:
    kind = "base"

    def pdf(self, t):
        raise NotImplementedError

    def cdf(self, t):
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Uniform(TimestepDistribution):
    kind = "uniform"

    def pdf(self, t):
        arr = _check_open(t)
        return _out(np.ones_like(arr), t)

    def cdf(self, t):
        arr = _check_closed(t)
        return _out(arr.copy(), t)

    def sample(self, rng, n):
        _check_count(n)
        return np.clip(rng.random(n), EDGE, 1.0 - EDGE)

    def config(self):
        return {"time_sampler": "uniform"}


@dataclass(frozen=True)
class LogitNormal(TimestepDistribution):
    mu: float = 0.0
    sigma: float = 1.0
    kind = "logit_normal"

    def __post_init__(self):
        if not (self.sigma > 0) or not math.isfinite(self.sigma):
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise ParameterError("mu must be finite")

    def pdf(self, t):
        arr = _check_open(t)
        z = (logit(arr) - self.mu) / self.sigma
        dens = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi) * arr * (1 - arr))
        return _out(dens, t)

    def cdf(self, t):
        arr = _check_closed(t)
        with np.errstate(divide="ignore"):
            z = (logit(arr) - self.mu) / self.sigma
        return _out(ndtr(z), t)

    def sample(self, rng, n):
        _check_count(n)
        u = rng.normal(self.mu, self.sigma, n)
        return np.clip(expit(u), EDGE, 1.0 - EDGE)

    def config(self):
        return {"time_sampler": "logit_normal", "mu": self.mu, "sigma": self.sigma}


@dataclass(frozen=True)
class MixExp(TimestepDistribution):
    a: float = 4.0
    centered: bool = True
    kind = "mix_exp"

    def __post_init__(self):
        if not (self.a > 0) or not math.isfinite(self.a):
            raise ParameterError(f"a must be positive, got {self.a}")

    @property
    def _shift(self) -> float:
        return 0.5 if self.centered else 0.0

    @property
    def normalizer(self) -> float:
        a = self.a
        if self.centered:
            return 4.0 / a * math.sinh(a / 2.0)
        return 2.0 * math.sinh(a) / a

    def _unnormalized(self, arr):
        x = self.a * (arr - self._shift)
        return np.exp(x) + np.exp(-x)

    def pdf(self, t):
        arr = _check_open(t)
        return _out(self._unnormalized(arr) / self.normalizer, t)

    def boundary_pdf(self, t):
        """Density extended continuously to the closed interval."""
        arr = _check_closed(t)
        return _out(self._unnormalized(arr) / self.normalizer, t)

    def cdf(self, t):
        arr = _check_closed(t)
        a, s = self.a, self._shift
        # antiderivative of 2 cosh(a (t - s)) is (2 / a) sinh(a (t - s))
        val = (2.0 / a) * (np.sinh(a * (arr - s)) - math.sinh(-a * s))
        return _out(np.clip(val / self.normalizer, 0.0, 1.0), t)

    def sample(self, rng, n):
        _check_count(n)
        if self.centered:
            t = self._sample_centered(rng, n)
        else:
            t = self._sample_inverse(rng, n)
        return np.clip(t, EDGE, 1.0 - EDGE)

    def _sample_centered(self, rng, n):
        # each half of the mixture is exp(+-a (t - 1/2)) on [0, 1]; both carry
        # half of the mass, and the "-" half is the mirror image of the "+" half
        a = self.a
        pick_up = rng.random(n) < 0.5
        u = rng.random(n)
        # truncated exponential rising toward t = 1: F(t) = (e^{a t} - 1) / (e^a - 1)
        t = np.log1p(u * math.expm1(a)) / a
        return np.where(pick_up, t, 1.0 - t)

    def _sample_inverse(self, rng, n):
        # inverse of sinh-based cdf: (2/a) sinh(a t) / norm = u
        u = rng.random(n)
        return np.arcsinh(u * self.normalizer * self.a / 2.0) / self.a

    def config(self):
        cfg = {"time_sampler": "mix_exp", "a": self.a}
        if not self.centered:
            cfg["centered"] = False
        return cfg


def _check_count(n):
    if int(n) < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")


def pdf(dist: TimestepDistribution, t):
    return dist.pdf(t)


def cdf(dist: TimestepDistribution, t):
    return dist.cdf(t)


def sample(dist: TimestepDistribution, rng, n: int) -> np.ndarray:
    return dist.sample(rng, n)


def from_config(cfg: dict) -> TimestepDistribution:
    """Build a sampler from ``time_sampler`` plus ``mu``/``sigma``/``a`` keys."""
    kind = str(cfg.get("time_sampler", "uniform")).strip()
    if kind == "uniform":
        return Uniform()
    if kind == "logit_normal":
        return LogitNormal(float(cfg.get("mu", 0.0)), float(cfg.get("sigma", 1.0)))
    if kind == "mix_exp":
        centered = str(cfg.get("centered", "true")).lower() not in ("false", "0", "no")
        return MixExp(float(cfg.get("a", 4.0)), centered=centered)
    raise ParameterError(f"unknown time_sampler {kind!r}")
