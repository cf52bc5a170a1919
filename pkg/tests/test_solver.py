import math

import numpy as np
import pytest

from rectflow.solver import (DivergenceError, Trajectory, euler_simulate, straightness,
                             straightness_report, write_trajectory_csv)
from rectflow.velocityfield import VelocityField


class TestEuler:
    @pytest.mark.parametrize("T", [1, 3, 17, 100])
    def test_constant_field_exact(self, T):
        c = np.array([0.5, -1.25])
        z0 = np.random.default_rng(0).normal(size=(4, 2))
        traj = euler_simulate(lambda z, t: np.broadcast_to(c, z.shape), z0, steps=T)
        np.testing.assert_allclose(traj.end, z0 + c, rtol=0, atol=1e-13)

    def test_states_follow_update(self):
        traj = euler_simulate(lambda z, t: -z + t, np.array([[1.0]]), steps=8)
        for k in range(8):
            assert traj.states[k + 1].tobytes() == (traj.states[k] + traj.dt * traj.velocities[k]).tobytes()
        assert len(traj.states) == len(traj.velocities) + 1
        np.testing.assert_array_equal(traj.timesteps, np.arange(8) / 8)

    def test_linear_decay_first_order(self):
        def err(T):
            z1 = euler_simulate(lambda z, t: -z, 1.0, steps=T, record=False)
            assert z1[0, 0] == pytest.approx((1 - 1 / T) ** T, rel=1e-12)
            return abs(z1[0, 0] - math.exp(-1))

        for T in (32, 64, 128):
            assert 1.8 <= err(T) / err(2 * T) <= 2.2

    def test_single_step(self):
        field = VelocityField(2, 3, hidden=(8,), seed=4)
        z0 = np.random.default_rng(1).normal(size=(5, 2))
        labels = np.array([0, 1, 2, 0, 1])
        z1 = euler_simulate(field, z0, labels, steps=1, record=False)
        np.testing.assert_array_equal(z1, z0 + field.predict(z0, 0.0, labels))

    def test_divergence(self):
        with pytest.raises(DivergenceError) as info:
            euler_simulate(lambda z, t: z * 1e300, np.array([[1e10]]), steps=5)
        assert info.value.step == 0

    def test_bad_steps(self):
        with pytest.raises(ValueError):
            euler_simulate(lambda z, t: z, [[0.0]], steps=0)


class TestStraightness:
    def test_constant_field_zero(self):
        traj = euler_simulate(lambda z, t: np.ones_like(z) * 3.0, np.zeros((3, 2)), steps=10)
        np.testing.assert_allclose(straightness(traj), 0.0, atol=1e-24)

    def test_two_step_example(self):
        traj = Trajectory(states=np.array([[[0.0]], [[0.0]], [[1.0]]]),
                          velocities=np.array([[[0.0]], [[2.0]]]), timesteps=np.array([0.0, 0.5]))
        assert straightness(traj)[0] == 1.0

    def test_translation_invariant(self):
        traj = euler_simulate(lambda z, t: np.sin(3 * z) + t, np.random.default_rng(2).normal(size=(6, 2)), steps=12)
        np.testing.assert_allclose(straightness(traj.translate([5.0, -7.0])), straightness(traj), rtol=1e-12)

    def test_nonnegative_and_zero_iff_chord(self):
        traj = euler_simulate(lambda z, t: -z, np.random.default_rng(3).normal(size=(8, 1)), steps=6)
        s = straightness(traj)
        assert np.all(s > 0)

    def test_report(self):
        traj = euler_simulate(lambda z, t: np.cos(z) * t, np.random.default_rng(4).normal(size=(512, 2)), steps=20)
        rep = straightness_report(traj)
        s = straightness(traj)
        assert rep.mean == pytest.approx(s.mean()) and rep.count == 512
        assert rep.stderr == pytest.approx(s.std(ddof=1) / math.sqrt(512))
        assert rep.log_mean == pytest.approx(math.log(rep.mean))


def test_trajectory_csv(tmp_path):
    traj = euler_simulate(lambda z, t: -z, np.array([[1.0, 2.0]]), steps=4)
    path = tmp_path / "traj.csv"
    write_trajectory_csv(traj, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,t,z0,z1,v0,v1"
    assert len(lines) == 6
    assert float(lines[-1].split(",")[2]) == traj.end[0, 0]
    many = euler_simulate(lambda z, t: -z * t, np.arange(6.0).reshape(3, 2), steps=4)
    write_trajectory_csv(many, path, index=2)
    assert path.read_text().splitlines()[1].split(",")[2:4] == ["4.0", "5.0"]
