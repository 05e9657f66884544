import math
from fractions import Fraction

import numpy as np
import pytest

from charctc import tensor as tc
from charctc import tensorio
from charctc.gradcheck import numeric_grad, relative_error
from charctc.layers import (
    BatchNormState,
    batchnorm,
    conv1d,
    lstm_scan,
    maxpool1d,
    reverse_padded,
    same_padding,
)
from charctc.tensor import Tensor, backward

FD_TOL = 1e-5
FD_FLOOR = 1e-6


def naive_conv1d(x, w, b, stride, padding):
    """Quintuple loop accumulating in (k, ci) order, matching the definition."""
    T, cin = x.shape
    K, _, cout = w.shape
    if padding == "same":
        t_out, left, _ = same_padding(T, K, stride)
    else:
        t_out, left = (T - K) // stride + 1, 0
    out = np.zeros((t_out, cout))
    for t in range(t_out):
        for co in range(cout):
            acc = b[co]
            for k in range(K):
                src = t * stride + k - left
                if 0 <= src < T:
                    for ci in range(cin):
                        acc += x[src, ci] * w[k, ci, co]
            out[t, co] = acc
    return out


def fd_check(build, arrays, seed_weights=0):
    """Scalar loss = sum(build(*tensors) * R); compare backprop against FD."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    R = np.random.default_rng(seed_weights).normal(size=out.shape)

    def loss():
        return tc.tsum(tc.mul(build(*ts), R))

    grads = backward(loss(), ts)
    worst = 0.0
    for t, g in zip(ts, grads):
        num = numeric_grad(lambda: loss().item(), t, h=1e-5)
        worst = max(worst, relative_error(g, num, FD_FLOOR).max())
    return worst


class TestConv1d:
    def test_identity(self):
        x = np.arange(5.0).reshape(5, 1)
        out = conv1d(x, np.ones((1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(out.data, x)

    def test_same_padding_example(self):
        x = np.array([[1.0], [2.0], [3.0]])
        out = conv1d(x, np.ones((3, 1, 1)), np.zeros(1), padding="same")
        np.testing.assert_array_equal(out.data[:, 0], [3.0, 6.0, 5.0])

    def test_zero_filters(self, rng):
        x = rng.normal(size=(7, 3))
        out = conv1d(x, np.zeros((3, 3, 4)), np.zeros(4))
        assert np.all(out.data == 0.0)

    @pytest.mark.parametrize("seed", range(30))
    def test_matches_naive_oracle_exactly(self, seed):
        # small integers make every partial sum exact, so any summation
        # order must reproduce the oracle bit for bit
        r = np.random.default_rng(seed)
        K = int(r.integers(1, 6))
        T = int(r.integers(K, 13))
        cin, cout = (int(v) for v in r.integers(1, 5, size=2))
        stride = int(r.integers(1, 3))
        padding = ["same", "valid"][seed % 2]
        x = r.integers(-4, 5, size=(T, cin)).astype(float)
        w = r.integers(-4, 5, size=(K, cin, cout)).astype(float)
        b = r.integers(-4, 5, size=cout).astype(float)
        got = conv1d(x, w, b, stride=stride, padding=padding).data
        np.testing.assert_array_equal(got, naive_conv1d(x, w, b, stride, padding))

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_oracle_real(self, seed):
        r = np.random.default_rng(100 + seed)
        K, T, cin, cout = 3, 9, 3, 2
        x, w, b = r.normal(size=(T, cin)), r.normal(size=(K, cin, cout)), r.normal(size=cout)
        got = conv1d(x, w, b, stride=1 + seed % 2).data
        np.testing.assert_allclose(got, naive_conv1d(x, w, b, 1 + seed % 2, "same"), atol=1e-12)

    def test_output_lengths(self):
        for T in range(1, 20):
            for stride in (1, 2, 3):
                out = conv1d(np.ones((T, 1)), np.ones((4, 1, 1)), None, stride=stride)
                assert out.shape[0] == math.ceil(T / stride)
                if T >= 4:
                    out = conv1d(np.ones((T, 1)), np.ones((4, 1, 1)), None, stride, "valid")
                    assert out.shape[0] == (T - 4) // stride + 1

    def test_errors(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            conv1d(np.ones((5, 2)), np.ones((3, 3, 1)))
        with pytest.raises(ValueError, match="exceeds"):
            conv1d(np.ones((2, 1)), np.ones((3, 1, 1)), padding="valid")

    def test_batched_equals_per_item(self, rng):
        x = rng.normal(size=(3, 8, 2))
        w, b = rng.normal(size=(3, 2, 4)), rng.normal(size=4)
        batched = conv1d(x, w, b).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], conv1d(x[i], w, b).data, atol=1e-13)


class TestMaxPool:
    def test_example(self):
        out = maxpool1d(np.array([[1.0], [3.0], [2.0], [5.0]]), 2, 2)
        np.testing.assert_array_equal(out.data[:, 0], [3.0, 5.0])

    @pytest.mark.parametrize("T", [1, 2, 5, 8])
    def test_constant(self, T):
        out = maxpool1d(np.full((T, 3), 4.0), 2, 2)
        assert out.shape == (math.ceil(T / 2), 3)
        assert np.all(out.data == 4.0)

    def test_tail_window(self):
        # oracle: max over the frames that exist in [t*s, t*s + w)
        x = np.array([[7.0]])
        assert maxpool1d(x, 2, 2).data.tolist() == [[7.0]]
        r = np.random.default_rng(3)
        for T in range(1, 12):
            x = r.normal(size=(T, 2))
            got = maxpool1d(x, 3, 2).data
            ref = np.array([x[s : s + 3].max(axis=0) for s in range(0, T, 2)])
            np.testing.assert_array_equal(got, ref)

    def test_tie_routes_to_earliest(self):
        x = Tensor(np.array([[2.0], [2.0], [1.0], [1.0]]), requires_grad=True)
        backward(maxpool1d(x, 2, 2).sum())
        np.testing.assert_array_equal(x.grad[:, 0], [1.0, 0.0, 1.0, 0.0])

    def test_empty(self):
        with pytest.raises(ValueError):
            maxpool1d(np.zeros((0, 2)), 2, 2)


class TestBatchNorm:
    def test_train_normalises(self, rng):
        x = rng.normal(3.0, 2.0, size=(4, 10, 5))
        out = batchnorm(x, np.ones(5), np.zeros(5), BatchNormState()).data
        flat = out.reshape(-1, 5)
        np.testing.assert_allclose(flat.mean(axis=0), 0.0, atol=1e-9)
        # eps=1e-5 shrinks the variance by var/(var+eps)
        var = x.reshape(-1, 5).var(axis=0)
        np.testing.assert_allclose(flat.var(axis=0), var / (var + 1e-5), atol=1e-12)
        np.testing.assert_allclose(flat.var(axis=0), 1.0, atol=1e-5)

    def test_zero_gamma(self, rng):
        beta = rng.normal(size=3)
        out = batchnorm(rng.normal(size=(2, 4, 3)), np.zeros(3), beta, BatchNormState()).data
        np.testing.assert_array_equal(out, np.broadcast_to(beta, out.shape))

    def test_infer_is_deterministic(self, rng):
        st = BatchNormState()
        g, b = rng.normal(size=3), rng.normal(size=3)
        batchnorm(rng.normal(size=(2, 6, 3)), g, b, st)
        x = rng.normal(size=(1, 5, 3))
        a1 = batchnorm(x, g, b, st, mode="infer").data
        a2 = batchnorm(x, g, b, st, mode="infer").data
        np.testing.assert_array_equal(a1, a2)

    def test_infer_without_stats(self):
        with pytest.raises(RuntimeError):
            batchnorm(np.ones((1, 3, 2)), np.ones(2), np.zeros(2), BatchNormState(), "infer")

    def test_running_stats_momentum(self, rng):
        st = BatchNormState()
        x1, x2 = rng.normal(size=(10, 2)), rng.normal(2.0, 1.0, size=(10, 2))
        batchnorm(x1, np.ones(2), np.zeros(2), st)
        batchnorm(x2, np.ones(2), np.zeros(2), st)
        np.testing.assert_allclose(st.mean, 0.9 * x1.mean(0) + 0.1 * x2.mean(0))
        np.testing.assert_allclose(st.var, 0.9 * x1.var(0, ddof=1) + 0.1 * x2.var(0, ddof=1))

    def test_mask_ignores_padding(self, rng):
        x = rng.normal(size=(2, 6, 3))
        mask = np.ones((2, 6))
        mask[1, 4:] = 0
        padded = x.copy()
        padded[1, 4:] = 1e3
        a = batchnorm(x, np.ones(3), np.zeros(3), BatchNormState(), mask=mask).data
        b = batchnorm(padded, np.ones(3), np.zeros(3), BatchNormState(), mask=mask).data
        np.testing.assert_allclose(a[mask > 0], b[mask > 0], atol=1e-12)

    def test_too_few_positions(self):
        with pytest.raises(ValueError):
            batchnorm(np.ones((1, 1, 2)), np.ones(2), np.zeros(2), BatchNormState())


class TestCoreSuite:
    def test_relu(self):
        assert tc.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]

    def test_log_softmax_uniform(self):
        out = tc.log_softmax(Tensor(np.full((3, 46), 0.7))).data
        np.testing.assert_allclose(out, math.log(1 / 46), atol=1e-15)

    def test_logsumexp_no_overflow(self):
        got = tc.logsumexp(Tensor([1000.0, 1000.0])).item()
        exact = Fraction(1000) + Fraction(math.log(2))
        assert got == pytest.approx(float(exact), abs=1e-12)
        assert math.isfinite(got)

    def test_logsumexp_all_neg_inf(self):
        assert tc.logsumexp(Tensor([-np.inf, -np.inf])).item() == -np.inf

    @pytest.mark.parametrize("seed", range(20))
    def test_log_softmax_rows_normalised(self, seed):
        x = np.random.default_rng(seed).normal(0, 30, size=(7, 46))
        out = tc.log_softmax(Tensor(x)).data
        np.testing.assert_allclose(np.exp(out).sum(axis=-1), 1.0, atol=1e-12)

    def test_dropout(self):
        x = Tensor(np.ones((200, 50)))
        assert tc.dropout(x, 0.1, train=False) is x
        y = tc.dropout(x, 0.1, train=True, seed=3, key=1, step=0).data
        kept = y != 0
        np.testing.assert_allclose(y[kept], 1 / 0.9)
        assert 0.85 < kept.mean() < 0.95
        y2 = tc.dropout(x, 0.1, train=True, seed=3, key=1, step=0).data
        np.testing.assert_array_equal(y, y2)
        y3 = tc.dropout(x, 0.1, train=True, seed=3, key=1, step=1).data
        assert not np.array_equal(y, y3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ValueError):
            tc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def _ops(r):
    """(name, builder, input arrays) for every differentiable op."""
    pos = lambda *s: r.uniform(0.5, 2.0, size=s)  # noqa: E731
    away = lambda *s: r.choice([-1, 1], size=s) * r.uniform(0.1, 2.0, size=s)  # noqa: E731
    yield "add", lambda a, b: a + b, [r.normal(size=(3, 4)), r.normal(size=(4,))]
    yield "sub", lambda a, b: a - b, [r.normal(size=(3, 1)), r.normal(size=(3, 4))]
    yield "mul", lambda a, b: a * b, [r.normal(size=(2, 3)), r.normal(size=(2, 3))]
    yield "neg", lambda a: -a, [r.normal(size=(4,))]
    yield "exp", tc.exp, [r.normal(size=(3, 2))]
    yield "log", tc.log, [pos(3, 2)]
    yield "matmul", tc.matmul, [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]
    yield "relu", tc.relu, [away(4, 3)]
    yield "sigmoid", tc.sigmoid, [r.normal(size=(5,))]
    yield "tanh", tc.tanh, [r.normal(size=(5,))]
    yield "concat", lambda a, b: tc.concat([a, b], axis=1), [r.normal(size=(2, 3)), r.normal(size=(2, 2))]
    yield "slice", lambda a: a[1:3, ::2], [r.normal(size=(4, 5))]
    yield "fancy", lambda a: a[np.array([0, 0, 2])], [r.normal(size=(3, 2))]
    yield "sum", lambda a: tc.tsum(a, axis=0), [r.normal(size=(3, 4))]
    yield "mean", lambda a: tc.mean(a, axis=1, keepdims=True), [r.normal(size=(3, 4))]
    yield "reshape", lambda a: a.reshape(6, 2), [r.normal(size=(3, 4))]
    yield "transpose", lambda a: tc.transpose(a, (1, 0, 2)), [r.normal(size=(2, 3, 4))]
    yield "logsumexp", lambda a: tc.logsumexp(a, axis=1), [r.normal(size=(3, 5))]
    yield "log_softmax", tc.log_softmax, [r.normal(size=(3, 6))]
    yield "softmax", tc.softmax, [r.normal(size=(3, 6))]
    yield "dropout", lambda a: tc.dropout(a, 0.3, True, seed=1, key=2), [r.normal(size=(4, 4))]
    K = int(r.integers(1, 4))
    yield "conv1d", lambda x, w, b: conv1d(x, w, b, stride=int(K % 2 + 1)), [
        r.normal(size=(2, 7, 3)), r.normal(size=(K, 3, 2)), r.normal(size=2)]
    # distinct values keep argmax away from ties
    pool_in = r.permutation(24).reshape(2, 4, 3) + r.uniform(0, 0.1, (2, 4, 3))
    yield "maxpool1d", lambda x: maxpool1d(x, 2, 2), [pool_in]

    def bn(x, g, b):
        mask = np.ones((2, 5))
        mask[1, 3:] = 0
        return batchnorm(x, g, b, BatchNormState(), "train", mask)

    yield "batchnorm", bn, [r.normal(size=(2, 5, 3)), r.normal(size=3), r.normal(size=3)]
    st = BatchNormState(mean=r.normal(size=3), var=pos(3))
    yield "batchnorm_infer", lambda x, g, b: batchnorm(x, g, b, st, "infer"), [
        r.normal(size=(2, 4, 3)), r.normal(size=3), r.normal(size=3)]
    yield "lstm_scan", lstm_scan, [r.normal(size=(2, 4, 8)), 0.5 * r.normal(size=(2, 8))]
    yield "reverse_padded", lambda x: reverse_padded(x, [3, 5]), [r.normal(size=(2, 5, 2))]


@pytest.mark.parametrize("seed", range(20))
def test_finite_differences_every_op(seed):
    r = np.random.default_rng(seed)
    for name, build, arrays in _ops(r):
        err = fd_check(build, arrays, seed_weights=seed)
        assert err < FD_TOL, f"{name}: relative error {err:.2e}"


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        (g,) = backward(x.sum(), [x])
        np.testing.assert_array_equal(g, np.ones((3, 4)))

    def test_relu_positive_passes_upstream(self):
        x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
        w = np.array([3.0, -7.0])
        backward(tc.tsum(tc.relu(x) * w))
        np.testing.assert_array_equal(x.grad, w)

    def test_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(x * 2.0)

    def test_unreachable_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones((2, 2)), requires_grad=True)
        gx, gu = backward(tc.tsum(x * x), [x, unused])
        np.testing.assert_array_equal(gx, 2 * np.ones(3))
        np.testing.assert_array_equal(gu, np.zeros((2, 2)))

    def test_diamond_accumulates(self):
        # y = a*b + a*c with b = 2x, c = x^2  ->  dy/dx = 2a + 2ax
        x = Tensor(np.array([1.5]), requires_grad=True)
        a = 3.0
        b = x * 2.0
        c = x * x
        y = tc.tsum(b * a + c * a)
        backward(y)
        assert x.grad[0] == pytest.approx(2 * a + 2 * a * 1.5)

    def test_graph_topological(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        h = tc.tanh(x @ x) + x
        loss = tc.logsumexp(h.reshape(9), axis=0)
        g = tc.trace(loss)
        pos = {n.id: i for i, n in enumerate(g.nodes)}
        for i, node in enumerate(g.nodes):
            for src in node.inputs:
                assert pos[src] < i
        assert len({n.id for n in g.nodes}) == len(g.nodes)

    def test_backward_visits_each_node_once(self, rng):
        calls = {}
        x = Tensor(rng.normal(size=3), requires_grad=True)
        y = x * x
        z = y + y
        for node in (y, z):
            fn = node.grad_fn

            def wrapped(g, fn=fn, node=node):
                calls[node.id] = calls.get(node.id, 0) + 1
                return fn(g)

            node.grad_fn = wrapped
        backward(z.sum())
        assert calls == {y.id: 1, z.id: 1}
        np.testing.assert_allclose(x.grad, 4 * x.data)


class TestTensorIO:
    @pytest.mark.parametrize("shape", [(3,), (2, 5), (1, 2, 3), ()])
    def test_roundtrip64(self, rng, shape, tmp_path):
        a = rng.normal(size=shape)
        tensorio.save(tmp_path / "a.tnsr", a)
        np.testing.assert_array_equal(tensorio.load(tmp_path / "a.tnsr"), a)

    def test_roundtrip32(self, rng):
        a = rng.normal(size=(4, 3))
        back = tensorio.loads(tensorio.dumps(a, width=4))
        assert back.dtype == np.float32
        np.testing.assert_array_equal(back, a.astype(np.float32))

    def test_header_layout(self):
        buf = tensorio.dumps(np.zeros((2, 3)))
        assert buf[:4] == b"TNSR"
        assert buf[4:8] == (1).to_bytes(4, "little")
        assert buf[8:12] == (2).to_bytes(4, "little")
        assert buf[12:20] == (2).to_bytes(8, "little")
        assert buf[28] == 8
        assert len(buf) == 29 + 6 * 8

    def test_corrupt(self):
        with pytest.raises(tensorio.TensorFormatError):
            tensorio.loads(b"XXXX" + bytes(20))
        with pytest.raises(tensorio.TensorFormatError):
            tensorio.loads(tensorio.dumps(np.ones(3))[:-1])
