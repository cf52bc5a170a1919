import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rectflow.coupling import (CouplingSet, generate_couplings, immiscible_assign, interpolate,
                               pairwise_cost, regenerate)
from rectflow.velocityfield import VelocityField


def brute_force_assignment(z1, z0):
    n = len(z1)
    best = None
    for perm in itertools.permutations(range(n)):
        cost = sum(float(((z1[i] - z0[perm[i]]) ** 2).sum()) for i in range(n))
        best = cost if best is None else min(best, cost)
    return best


class TestPairwiseCost:
    def test_identical_zero_diagonal(self):
        z = np.random.default_rng(0).normal(size=(5, 3))
        assert np.all(np.diag(pairwise_cost(z, z)) == 0)

    def test_scalar(self):
        assert pairwise_cost([[0.0]], [[3.0]]).tolist() == [[9.0]]

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        loop = np.array([[sum((a[i, k] - b[j, k]) ** 2 for k in range(3)) for j in range(4)] for i in range(4)])
        np.testing.assert_allclose(pairwise_cost(a, b), loop, rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pairwise_cost(np.zeros((3, 2)), np.zeros((2, 2)))


class TestAssign:
    def test_swap_example(self):
        a = immiscible_assign([[0.0], [10.0]], [[9.0], [1.0]])
        assert a.perm.tolist() == [1, 0]
        assert a.cost == 2.0

    def test_self_is_identity(self):
        z = np.random.default_rng(2).normal(size=(12, 2))
        a = immiscible_assign(z, z)
        assert a.perm.tolist() == list(range(12)) and a.cost == 0.0

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 8))
        d = int(rng.integers(1, 4))
        z1, z0 = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        assert immiscible_assign(z1, z0).cost == pytest.approx(brute_force_assignment(z1, z0), abs=1e-12)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            immiscible_assign([[np.inf]], [[0.0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 2), elements=st.floats(-5, 5)), arrays(np.float64, (6, 2), elements=st.floats(-5, 5)))
def test_assignment_properties(z1, z0):
    a = immiscible_assign(z1, z0)
    identity = float(((z1 - z0) ** 2).sum())
    assert a.cost <= identity + 1e-9
    assert sorted(a.perm.tolist()) == list(range(6))
    # re-pairing keeps the noise multiset
    moved = a.apply(z0)
    assert sorted(map(tuple, moved)) == sorted(map(tuple, z0))
    np.testing.assert_allclose(a.cost, ((z1 - moved) ** 2).sum(), rtol=1e-12, atol=1e-12)


class TestInterpolate:
    def test_endpoints(self):
        z0, z1 = np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]])
        np.testing.assert_array_equal(interpolate(z0, z1, 0.0), z0)
        np.testing.assert_array_equal(interpolate(z0, z1, 1.0), z1)

    def test_quarter(self):
        np.testing.assert_array_equal(interpolate([0.0, 0.0], [2.0, 4.0], 0.25), [0.5, 1.0])

    def test_per_row_t(self):
        out = interpolate(np.zeros((2, 1)), np.ones((2, 1)), np.array([0.2, 0.7]))
        np.testing.assert_allclose(out[:, 0], [0.2, 0.7])


class TestCouplingSets:
    def test_constant_field(self):
        model = VelocityField.constant([1.0, 0.0], num_conditions=8)
        cs = generate_couplings(model, 50, steps=7, seed=3)
        np.testing.assert_allclose(cs.z1, cs.z0 + [1.0, 0.0], atol=1e-12)
        assert cs.labels.min() >= 0 and cs.labels.max() < 8

    def test_anchoring_no_op_at_unit_scale(self):
        model = VelocityField(2, 4, hidden=(16,), seed=1)
        a = generate_couplings(model, 40, steps=5, omega=1.0, anchored=False, seed=2, shard_size=16)
        b = generate_couplings(model, 40, steps=5, omega=1.0, anchored=True, seed=2, shard_size=16)
        assert a.z1.tobytes() == b.z1.tobytes() and a.z0.tobytes() == b.z0.tobytes()

    def test_regenerate_from_metadata(self, tmp_path):
        model = VelocityField(2, 4, hidden=(16,), seed=1)
        cs = generate_couplings(model, 30, steps=4, omega=2.0, anchored=True, seed=9, shard_size=8, inner=3)
        path = tmp_path / "c.rfcpl"
        cs.save(path)
        again = regenerate(CouplingSet.load(path).meta, model)
        path2 = tmp_path / "c2.rfcpl"
        again.save(path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        cs = CouplingSet(rng.normal(size=(9, 3)), rng.normal(size=(9, 3)), rng.integers(0, 5, 9), 5,
                         {"omega": 2.0, "note": "x"})
        path = tmp_path / "c.rfcpl"
        cs.save(path)
        raw = path.read_bytes()
        assert raw[:5] == b"RFCPL"
        back = CouplingSet.load(path)
        assert back.z0.tobytes() == cs.z0.tobytes() and back.z1.tobytes() == cs.z1.tobytes()
        assert np.array_equal(back.labels, cs.labels) and back.num_conditions == 5
        back.save(tmp_path / "d.rfcpl")
        assert (tmp_path / "d.rfcpl").read_bytes() == raw
        # header: version, dim, count, cond count
        import struct
        assert struct.unpack("<IIQI", raw[5:25]) == (1, 3, 9, 5)
        meta_len = struct.unpack("<I", raw[25:29])[0]
        assert len(raw) == 29 + meta_len + 9 * (2 * 3 * 8 + 4)

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            CouplingSet(np.zeros((2, 2)), np.zeros((2, 2)), [0, 3], 3)
