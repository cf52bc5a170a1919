import numpy as np
import pytest

import rectflow.training as training
from rectflow.coupling import CouplingSet, interpolate
from rectflow.tensornet import DimensionError, numerical_grad
from rectflow.timesamplers import LogitNormal
from rectflow.toydata import make_task
from rectflow.training import (TrainConfig, TrainingError, distill_loss, reflow_loss, rf_loss, train_stage,
                               write_metrics)
from rectflow.velocityfield import NULL, VelocityField

TASK = make_task("gauss8")


def loop_loss(field, z0, z1, t, labels):
    total = 0.0
    for i in range(len(z0)):
        zt = (1 - t[i]) * z0[i] + t[i] * z1[i]
        v = field.predict(zt[None], np.array([t[i]]), [labels[i]])[0]
        total += sum((z1[i, k] - z0[i, k] - v[k]) ** 2 for k in range(len(v)))
    return total / len(z0)


@pytest.fixture
def small():
    return VelocityField(2, 8, hidden=(16, 16), seed=5)


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    return rng.normal(size=(7, 2)), rng.normal(size=(7, 2)) * 3, rng.uniform(0.01, 0.99, 7), rng.integers(-1, 8, 7)


class TestLosses:
    def test_zero_field_constant_chord(self):
        field = VelocityField.constant([0.0, 0.0], 8)
        z0 = np.random.default_rng(1).normal(size=(5, 2))
        loss = rf_loss(field, z0, z0 + [3.0, 4.0], np.full(5, 0.3), np.zeros(5, int))
        assert float(loss.data) == pytest.approx(25.0, rel=1e-14)

    def test_perfect_predictor_zero(self):
        field = VelocityField.constant([1.0, -2.0], 8)
        z0 = np.random.default_rng(2).integers(-5, 5, size=(4, 2)).astype(float)
        z1 = z0 + [1.0, -2.0]
        t = np.full(4, 0.5)
        assert float(rf_loss(field, z0, z1, t, [0] * 4).data) == 0.0
        assert float(reflow_loss(field, z0, z1, t, [0] * 4).data) == 0.0
        assert float(distill_loss(field, z0, z1, [0] * 4).data) == 0.0

    def test_distill_zero_field(self):
        field = VelocityField.constant([0.0, 0.0], 8)
        rng = np.random.default_rng(3)
        z0, z1 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        np.testing.assert_allclose(float(distill_loss(field, z0, z1, [1] * 6).data),
                                   ((z1 - z0) ** 2).sum(axis=1).mean(), rtol=1e-14)

    def test_loop_oracle(self, small, batch):
        z0, z1, t, labels = batch
        expect = loop_loss(small, z0, z1, t, labels)
        assert float(rf_loss(small, z0, z1, t, labels).data) == pytest.approx(expect, abs=1e-12)
        assert float(reflow_loss(small, z0, z1, t, labels).data) == pytest.approx(expect, abs=1e-12)
        d = loop_loss(small, z0, z1, np.zeros(7), labels)
        assert float(distill_loss(small, z0, z1, labels).data) == pytest.approx(d, abs=1e-12)

    def test_shared_kernel(self, small, batch):
        z0, z1, t, labels = batch
        assert rf_loss(small, z0, z1, t, labels).data == reflow_loss(small, z0, z1, t, labels).data

    def test_dim_mismatch(self, small):
        with pytest.raises(DimensionError):
            rf_loss(small, np.zeros((3, 3)), np.zeros((3, 3)), np.full(3, 0.5), [0] * 3)
        with pytest.raises(DimensionError):
            rf_loss(small, np.zeros((3, 2)), np.zeros((2, 2)), np.full(3, 0.5), [0] * 3)

    @pytest.mark.parametrize("which", ["rf", "distill"])
    def test_parameter_gradients(self, which):
        field = VelocityField(2, 3, hidden=(6, 5), seed=9)
        rng = np.random.default_rng(4)
        z0, z1 = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        t, labels = rng.uniform(size=4), np.array([0, 1, NULL, 2])

        def value():
            if which == "rf":
                return float(rf_loss(field, z0, z1, t, labels).data)
            return float(distill_loss(field, z0, z1, labels).data)

        for p in field.parameters():
            p.grad = None
        (rf_loss(field, z0, z1, t, labels) if which == "rf" else distill_loss(field, z0, z1, labels)).backward()
        for p in field.parameters():
            if p.grad is None:
                continue
            numeric = numerical_grad(value, p.data)
            denom = np.maximum(np.abs(numeric), 1e-6)
            assert (np.abs(p.grad - numeric) / denom).max() < 1e-4


def quick(stage="fm", **kw):
    kw.setdefault("iterations", 3)
    kw.setdefault("batch_size", 32)
    kw.setdefault("hidden", (16,))
    return TrainConfig(stage=stage, **kw)


def fake_couplings(n=64, seed=0):
    rng = np.random.default_rng(seed)
    z0 = rng.normal(size=(n, 2))
    return CouplingSet(z0, z0 + 1.0, rng.integers(0, 8, n), 8)


class TestTrainStage:
    def test_zero_lr_keeps_parameters(self):
        init = VelocityField(2, 8, hidden=(16,), seed=1)
        field, _ = train_stage(quick(iterations=1, lr=0.0), TASK, init=init)
        for a, b in zip(init.parameters(), field.parameters()):
            assert a.data.tobytes() == b.data.tobytes()

    def test_init_not_mutated(self):
        init = VelocityField(2, 8, hidden=(16,), seed=1)
        before = [p.data.copy() for p in init.parameters()]
        train_stage(quick(), TASK, init=init)
        for b, p in zip(before, init.parameters()):
            assert b.tobytes() == p.data.tobytes()

    @pytest.mark.parametrize("stage", ["fm", "rf1", "rf2", "distill"])
    def test_deterministic(self, stage, tmp_path):
        cs = fake_couplings() if stage in ("rf2", "distill") else None
        cfg = quick(stage, immiscible=stage == "rf1", sampler=LogitNormal())
        a, ra = train_stage(cfg, TASK, couplings=cs)
        b, rb = train_stage(cfg, TASK, couplings=cs)
        assert a.save(tmp_path / "a") == b.save(tmp_path / "b")
        assert [r.loss for r in ra] == [r.loss for r in rb]
        assert a.stage == training.STAGE_TAGS[stage]

    def test_seed_changes_result(self, tmp_path):
        a, _ = train_stage(quick(seed=1), TASK)
        b, _ = train_stage(quick(seed=2), TASK)
        assert a.save(tmp_path / "a") != b.save(tmp_path / "b")

    def test_immiscible_never_costs_more(self):
        _, reports = train_stage(quick("rf1", iterations=20, immiscible=True), TASK)
        assert all(r.pair_cost <= r.random_cost + 1e-9 for r in reports)
        _, reports = train_stage(quick("rf1", iterations=20, immiscible=True, immiscible_scope="batch"), TASK)
        assert all(r.pair_cost <= r.random_cost + 1e-9 for r in reports)

    def test_reflow_never_draws_fresh_data(self, monkeypatch):
        def forbidden(*a, **k):
            raise AssertionError("reflow touched the data distribution")

        monkeypatch.setattr(training, "sample_data", forbidden)
        train_stage(quick("rf2"), TASK, couplings=fake_couplings())
        train_stage(quick("distill", cond_drop=0.0), TASK, couplings=fake_couplings())

    def test_coupling_stage_requires_couplings(self):
        with pytest.raises(ValueError):
            train_stage(quick("rf2"), TASK)

    def test_non_finite_loss_reports_iteration(self):
        cs = fake_couplings()
        cs.z1[:] = np.inf
        with pytest.raises(TrainingError) as info:
            train_stage(quick("rf2"), TASK, couplings=cs)
        assert info.value.iteration == 1

    def test_loss_reports(self, tmp_path):
        seen = []
        _, reports = train_stage(quick(iterations=10), TASK, callback=seen.append, log_every=4)
        assert [r.iteration for r in reports] == [4, 8, 10] and seen == reports
        assert all(r.loss >= 0 for r in reports)
        path = tmp_path / "m.csv"
        write_metrics(reports, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,loss,ema_loss,seconds" and len(lines) == 4

    def test_bad_config(self):
        with pytest.raises(ValueError):
            TrainConfig(iterations=0)
        with pytest.raises(ValueError):
            TrainConfig(stage="rf3")


def test_distill_learns_one_step_map():
    cs = fake_couplings(256)
    field, reports = train_stage(quick("distill", iterations=300, cond_drop=0.0, batch_size=64), TASK,
                                 couplings=cs)
    out = field.predict(cs.z0[:16], 0.0, cs.labels[:16])
    assert np.abs(out - 1.0).max() < 0.1


@pytest.mark.slow
def test_rf1_ema_loss_halves():
    cfg = TrainConfig("rf1", iterations=5000, sampler=LogitNormal(), immiscible=True, seed=7)
    _, reports = train_stage(cfg, TASK)
    ema = {r.iteration: r.ema_loss for r in reports}
    assert ema[5000] <= 0.5 * ema[100]
