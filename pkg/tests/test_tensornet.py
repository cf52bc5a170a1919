import numpy as np
import pytest

from rectflow.tensornet import (Adam, AdamState, ContractError, DimensionError, MlpNet, Tensor,
                                adam_step, concat, numerical_grad, read_checkpoint,
                                write_checkpoint)


def matmul_oracle(x, net):
    """Straight-line loops over rows/columns, no numpy matmul."""
    h = [list(row) for row in x]
    last = len(net.weights) - 1
    for li, (w, b) in enumerate(zip(net.weights, net.biases)):
        W, bias = w.data, b.data
        out = []
        for row in h:
            vals = []
            for j in range(W.shape[1]):
                acc = bias[j]
                for i in range(W.shape[0]):
                    acc += row[i] * W[i, j]
                if li < last:
                    acc = acc / (1.0 + np.exp(-acc))
                vals.append(acc)
            out.append(vals)
        h = out
    return np.array(h)


class TestForward:
    def test_identity_linear(self):
        net = MlpNet([2, 2])
        net.weights[0].data[...] = np.eye(2)
        net.biases[0].data[...] = 0
        out = net.forward(Tensor([[0.3, -1.5]]))
        assert out.shape == (1, 2)
        np.testing.assert_array_equal(out.data, [[0.3, -1.5]])

    def test_zero_weights(self):
        net = MlpNet([3, 5, 2])
        for p in net.parameters():
            p.data[...] = 0
        out = net.forward(np.random.default_rng(0).normal(size=(4, 3)))
        np.testing.assert_array_equal(out.data, np.zeros((4, 2)))

    def test_matches_loop_oracle(self):
        net = MlpNet([2, 16, 2], seed=3)
        x = np.array([[0.5, -1.0], [2.0, 0.25]])
        np.testing.assert_allclose(net.forward(x).data, matmul_oracle(x, net), rtol=1e-12, atol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            MlpNet([3, 4, 2]).forward(np.zeros((2, 2)))

    def test_pure(self):
        net = MlpNet([4, 32, 32, 3], seed=11)
        x = np.random.default_rng(1).normal(size=(7, 4))
        a = net.forward(x).data
        b = net.forward(x).data
        assert a.tobytes() == b.tobytes()

    def test_parameter_count(self):
        assert MlpNet([34, 128, 128, 128, 2]).num_parameters() == sum(
            p.size for p in MlpNet([34, 128, 128, 128, 2]).parameters())


class TestBackward:
    def test_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_square(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        x.square().sum().backward()
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_tape_cleared(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = (x * 3.0).sum()
        y.backward()
        with pytest.raises(ContractError):
            y.backward()

    def test_broadcast_and_concat(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2,)), requires_grad=True)
        c = Tensor(rng.normal(size=(3, 1)), requires_grad=True)

        def f():
            return float(((concat([a + b, c], axis=1) * 1.5).square().sum()).data)

        loss = (concat([a + b, c], axis=1) * 1.5).square().sum()
        loss.backward()
        for t in (a, b, c):
            np.testing.assert_allclose(t.grad, numerical_grad(f, t.data), rtol=1e-6)

    def test_take_rows_scatter(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        table.take_rows([0, 2, 0]).sum().backward()
        np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])

    def test_input_gradient(self):
        net = MlpNet([3, 8, 2], seed=2)
        x = Tensor(np.random.default_rng(5).normal(size=(4, 3)), requires_grad=True)
        net.forward(x).square().sum().backward()

        def f():
            return float(net.forward(x.data).square().sum().data)

        np.testing.assert_allclose(x.grad, numerical_grad(f, x.data), rtol=1e-6, atol=1e-9)


def relative_errors(analytic, numeric):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.abs(analytic - numeric) / np.maximum(scale, 1e-6)


def gradcheck_random_net(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 5))
    widths = [int(w) for w in rng.integers(1, 33, depth + 1)]
    net = MlpNet(widths, activation=("silu", "tanh")[seed % 2], seed=seed)
    x = rng.normal(size=(3, widths[0]))
    target = rng.normal(size=(3, widths[-1]))

    def loss_value():
        return float((net.forward(x) - target).square().sum().data)

    net.zero_grad()
    (net.forward(x) - target).square().sum().backward()
    worst = 0.0
    for p in net.parameters():
        numeric = numerical_grad(loss_value, p.data, h=1e-5)
        worst = max(worst, float(relative_errors(p.grad, numeric).max()))
    return worst


@pytest.mark.parametrize("seed", range(10))
def test_gradcheck_random_nets(seed):
    assert gradcheck_random_net(seed) < 1e-4


class TestAdam:
    def test_zero_gradient_no_decay(self):
        p = np.array([1.0, -2.0])
        adam_step([p], [np.zeros(2)], AdamState(lr=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p, [1.0, -2.0])

    def test_single_step(self):
        # bias-corrected first step: m_hat = 1, v_hat = 1
        p = np.array([0.5])
        state = AdamState(lr=0.01, weight_decay=0.0)
        adam_step([p], [np.array([1.0])], state)
        assert state.step == 1
        assert p[0] == pytest.approx(0.5 - 0.01 / (1.0 + 1e-8), abs=1e-15)

    def test_decoupled_decay(self):
        p = np.array([2.0])
        adam_step([p], [np.zeros(1)], AdamState(lr=0.1, weight_decay=0.5))
        assert p[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        init = rng.normal(size=(4, 3))
        grads = [rng.normal(size=(4, 3)) for _ in range(5)]
        a, b = init.copy(), init.copy()
        sa, sb = AdamState(), AdamState()
        for g in grads:
            adam_step([a], [g], sa)
            adam_step([b], [g.copy()], sb)
        assert a.tobytes() == b.tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step([np.zeros(3)], [np.zeros(2)], AdamState())

    def test_adam_wrapper_trains(self):
        net = MlpNet([1, 8, 1], seed=0)
        opt = Adam(net.parameters(), lr=1e-2, weight_decay=0.0)
        x = np.linspace(-1, 1, 16)[:, None]
        first = None
        for _ in range(200):
            opt.zero_grad()
            loss = (net.forward(x) - 2 * x).square().mean()
            first = first if first is not None else float(loss.data)
            loss.backward()
            opt.step()
        assert float(loss.data) < 0.1 * first


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    blocks = [("w", rng.normal(size=(3, 4))), ("b", rng.normal(size=(4,)))]
    path = tmp_path / "net.rflow"
    write_checkpoint(path, [3, 4], "silu", blocks, {"stage": "fm", "x": 1.5})
    widths, act, got, meta = read_checkpoint(path)
    assert widths == [3, 4] and act == "silu" and meta == {"stage": "fm", "x": "1.5"}
    for name, arr in blocks:
        assert got[name].tobytes() == arr.tobytes()
    raw = path.read_bytes()
    assert raw[:5] == b"RFLOW"
    path2 = tmp_path / "again.rflow"
    write_checkpoint(path2, widths, act, list(got.items()), meta)
    assert path2.read_bytes() == raw
