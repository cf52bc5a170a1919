"""scikit-learn style front end: fit a conditional flow to labelled points.

>>> est = RectifiedFlowSampler(iterations=200, hidden=(32, 32)).fit(X, y)
>>> Xs, ys = est.sample(100, random_state=0)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .coupling import generate_couplings
from .evalharness import conditional_w2
from .solver import euler_simulate
from .timesamplers import LogitNormal, MixExp, Uniform
from .toydata import ToyTask, sample_noise
from .training import TrainConfig, train_stage
from .velocityfield import GuidanceSpec


class RectifiedFlowSampler(BaseEstimator):
    """Noise-to-data flow for labelled point clouds.

    ``fit`` trains a 1-rectified flow (logit-normal t, label-wise immiscible
    pairing), then optionally one reflow round on simulated couplings and a
    one-step distillation. ``transform`` pushes given noise through the flow;
    ``sample`` draws fresh noise first.
    """

    def __init__(self, hidden=(128, 128, 128), iterations=2000, reflow_iterations=0, distill_iterations=0,
                 n_couplings=2048, steps=100, omega=1.0, anchored=True, immiscible=True, batch_size=256,
                 lr=1e-3, cond_drop=0.1, random_state=0):
        self.hidden = hidden
        self.iterations = iterations
        self.reflow_iterations = reflow_iterations
        self.distill_iterations = distill_iterations
        self.n_couplings = n_couplings
        self.steps = steps
        self.omega = omega
        self.anchored = anchored
        self.immiscible = immiscible
        self.batch_size = batch_size
        self.lr = lr
        self.cond_drop = cond_drop
        self.random_state = random_state

    def _cfg(self, stage, iterations, sampler, **kw):
        return TrainConfig(stage=stage, iterations=int(iterations), batch_size=int(self.batch_size), sampler=sampler,
                           lr=float(self.lr), seed=int(self.random_state), hidden=tuple(self.hidden), **kw)

    def fit(self, X, y=None):
        if y is None:
            X = check_array(X, dtype=np.float64)
            y = np.zeros(len(X), dtype=np.int64)
        else:
            X, y = check_X_y(X, y, dtype=np.float64)
        self.encoder_ = LabelEncoder().fit(y)
        codes = self.encoder_.transform(y).astype(np.int64)
        k = len(self.encoder_.classes_)
        centers = np.stack([X[codes == c].mean(axis=0) for c in range(k)])
        task = ToyTask("empirical", X.shape[1], k, centers, float(X.std()))
        self.n_features_in_ = X.shape[1]
        self.class_counts_ = np.bincount(codes, minlength=k)
        field, _ = train_stage(self._cfg("rf1", self.iterations, LogitNormal(), immiscible=bool(self.immiscible),
                                         cond_drop=float(self.cond_drop)), task, data=(X, codes))
        self.history_ = ["rf1"]
        if self.reflow_iterations:
            cs = self._couplings(field, 1)
            field, _ = train_stage(self._cfg("rf2", self.reflow_iterations, MixExp(4.0),
                                             cond_drop=float(self.cond_drop)), task, init=field, couplings=cs)
            self.history_.append("rf2")
        if self.distill_iterations:
            cs = self._couplings(field, 2)
            field, _ = train_stage(self._cfg("distill", self.distill_iterations, Uniform(), cond_drop=0.0),
                                   task, init=field, couplings=cs)
            self.history_.append("distill")
        self.field_ = field
        return self

    def _couplings(self, field, round_):
        return generate_couplings(field, int(self.n_couplings), steps=int(self.steps), omega=float(self.omega),
                                  anchored=bool(self.anchored), seed=int(self.random_state) * 10 + round_)

    @property
    def one_step(self) -> bool:
        check_is_fitted(self, "field_")
        return self.field_.stage == "distilled"

    def transform(self, Z, y, steps=None):
        """Map noise rows ``Z`` with labels ``y`` to data space."""
        check_is_fitted(self, "field_")
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {Z.shape[1]}")
        y = np.broadcast_to(np.asarray(y), (len(Z),))
        codes = self.encoder_.transform(y)
        if self.one_step:
            return euler_simulate(self.field_, Z, codes, 1, record=False)
        steps = int(self.steps if steps is None else steps)
        guidance = GuidanceSpec(float(self.omega)) if self.omega != 1.0 and not self.reflow_iterations else None
        return euler_simulate(self.field_, Z, codes, steps, guidance=guidance, record=False)

    def sample(self, n, y=None, steps=None, random_state=None):
        """Draw ``n`` points; labels follow the training frequencies unless given."""
        check_is_fitted(self, "field_")
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        if y is None:
            p = self.class_counts_ / self.class_counts_.sum()
            y = self.encoder_.classes_[rng.choice(len(p), size=n, p=p)]
        else:
            y = np.broadcast_to(np.asarray(y), (n,))
        Z = sample_noise(rng, n, self.n_features_in_)
        return self.transform(Z, y, steps=steps), np.asarray(y)

    def score(self, X, y=None, steps=None):
        """Negative class-conditional W2 between ``X`` and samples with the same labels."""
        check_is_fitted(self, "field_")
        X = check_array(X, dtype=np.float64)
        y = np.full(len(X), self.encoder_.classes_[0]) if y is None else np.asarray(y)
        Xs, _ = self.sample(len(X), y=y, steps=steps)
        return -conditional_w2(Xs, y, X, y)
