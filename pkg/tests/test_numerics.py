import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patchar import numerics as nx
from patchar.numerics import AttentionMask, Tensor

from conftest import gradcheck


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for q in range(k):
                acc += a[i, q] * b[q, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(3, 3))
        assert np.array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)

    def test_hand_example(self):
        out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        assert np.array_equal(out.data, [[2.0], [4.0]])

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_flop_counter(self, rng):
        with nx.count_flops() as c:
            nx.matmul(Tensor(rng.normal(size=(2, 4, 5))), Tensor(rng.normal(size=(5, 3))))
        assert c.total == 2 * 4 * 5 * 3 * 2


class TestRMSNorm:
    def test_ones_row(self):
        out = nx.rmsnorm(Tensor(np.ones((1, 6))), Tensor(np.ones(6))).data
        np.testing.assert_allclose(out, 1.0, atol=1e-6)

    def test_direct_formula(self, rng):
        x, g = rng.normal(size=(3, 7)), rng.normal(size=7)
        ref = x / np.sqrt((x**2).mean(axis=1, keepdims=True) + 1e-6) * g
        np.testing.assert_allclose(nx.rmsnorm(Tensor(x), Tensor(g)).data, ref, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (2, 8), elements=st.floats(-3, 3)).filter(lambda a: (np.abs(a).mean(axis=1) > 0.1).all()),
        st.floats(0.5, 20.0),
    )
    def test_scale_invariance(self, x, k):
        g = Tensor(np.ones(8))
        a = nx.rmsnorm(Tensor(x), g).data
        b = nx.rmsnorm(Tensor(k * x), g).data
        # scaling by k is the same as shrinking the floor to eps / k^2
        np.testing.assert_allclose(b, nx.rmsnorm(Tensor(x), g, eps=nx.RMS_EPS / k**2).data, atol=1e-9)
        ms = (x**2).mean(axis=1, keepdims=True)
        floor_effect = np.abs(x) / np.sqrt(ms) * nx.RMS_EPS / (2 * ms) * abs(1 - 1 / k**2)
        assert np.all(np.abs(a - b) <= floor_effect * 1.01 + 1e-12)

    def test_gradient(self, rng):
        assert gradcheck(lambda x, g: (nx.rmsnorm(x, g) ** 2 * 0.5).sum() + nx.rmsnorm(x, g)[0, 1], [rng.normal(size=(3, 6)), rng.normal(size=6)]) < 1e-4


class TestRope:
    def test_position_zero_is_identity(self, rng):
        x = rng.normal(size=(1, 8))
        np.testing.assert_array_equal(nx.rope_apply(Tensor(x), [0]).data, x)

    def test_pair_norms_preserved(self, rng):
        x = rng.normal(size=(5, 8))
        y = nx.rope_apply(Tensor(x), np.arange(5) * 7).data
        np.testing.assert_allclose(
            np.hypot(y[:, 0::2], y[:, 1::2]), np.hypot(x[:, 0::2], x[:, 1::2]), atol=1e-12
        )

    def test_relative_angle(self, rng):
        q, k = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))

        def dot(m, n):
            return (nx.rope_apply(Tensor(q), [m]).data @ nx.rope_apply(Tensor(k), [n]).data.T).item()

        for m, n, s in [(3, 1, 5), (0, 4, 11), (9, 9, 2)]:
            assert dot(m, n) == pytest.approx(dot(m + s, n + s), abs=1e-12)

    def test_odd_width_rejected(self):
        with pytest.raises(ValueError):
            nx.rope_apply(Tensor(np.ones((2, 3))), [0, 1])

    def test_gradient(self, rng):
        w = rng.normal(size=(4, 6))
        assert gradcheck(lambda x: (nx.rope_apply(x, [0, 3, 5, 8]) * Tensor(w)).sum(), [rng.normal(size=(4, 6))]) < 1e-4


def dense_attention(q, k, v, causal):
    s = q @ k.T / math.sqrt(q.shape[1])
    if causal:
        s = np.where(np.tril(np.ones_like(s, dtype=bool)), s, -np.inf)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ v


class TestAttention:
    def test_single_token_returns_value(self, rng):
        q, k, v = (rng.normal(size=(1, 4)) for _ in range(3))
        np.testing.assert_allclose(nx.attention(Tensor(q), Tensor(k), Tensor(v)).data, v, atol=1e-15)

    def test_causal_first_query_sees_only_itself(self, rng):
        q, k, v = (rng.normal(size=(4, 4)) for _ in range(3))
        out, w = nx.attention(Tensor(q), Tensor(k), Tensor(v), "causal", return_weights=True)
        np.testing.assert_array_equal(w.data[0], [1.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(out.data[0], v[0], atol=1e-15)

    @pytest.mark.parametrize("causal", [False, True])
    def test_matches_dense_reference(self, rng, causal):
        q, k, v = (rng.normal(size=(4, 6)) for _ in range(3))
        out = nx.attention(Tensor(q), Tensor(k), Tensor(v), "causal" if causal else "bidirectional").data
        np.testing.assert_allclose(out, dense_attention(q, k, v, causal), atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        q, k, v = (rng.normal(size=(2, 7, 4)) for _ in range(3))
        for kind in ("causal", "bidirectional"):
            _, w = nx.attention(Tensor(q), Tensor(k), Tensor(v), kind, return_weights=True)
            np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)

    def test_causal_no_future_leakage(self, rng):
        q, k, v = (rng.normal(size=(6, 4)) for _ in range(3))
        base = nx.attention(Tensor(q), Tensor(k), Tensor(v), "causal").data
        for j in range(1, 6):
            k2, v2 = k.copy(), v.copy()
            k2[j] += 5.0
            v2[j] -= 3.0
            out = nx.attention(Tensor(q), Tensor(k2), Tensor(v2), "causal").data
            np.testing.assert_array_equal(out[:j], base[:j])

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            nx.attention(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 5))), Tensor(np.ones((3, 4))))

    def test_mask_matrix(self):
        m = AttentionMask("causal", 3).matrix()
        assert m.tolist() == [[True, False, False], [True, True, False], [True, True, True]]
        with pytest.raises(ValueError):
            AttentionMask("sliding", 3)

    @pytest.mark.parametrize("kind", ["causal", "bidirectional"])
    def test_gradient(self, rng, kind):
        w = rng.normal(size=(5, 4))
        build = lambda q, k, v: (nx.attention(q, k, v, kind) * Tensor(w)).sum()
        assert gradcheck(build, [rng.normal(size=(5, 4)) for _ in range(3)]) < 1e-4


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = nx.Parameter(rng.normal(size=(3, 4)))
        nx.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_matmul_norm_against_finite_differences(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        assert gradcheck(lambda a, b: (nx.matmul(a, b) ** 2).sum(), [a, b], h=1e-5) < 1e-5

    def test_constant_loss_has_zero_gradient(self, rng):
        x = nx.Parameter(rng.normal(size=3))
        loss = x.sum() * 0.0 + 4.0
        nx.backward(loss)
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_non_scalar_rejected(self, rng):
        with pytest.raises(ValueError):
            nx.backward(nx.Parameter(rng.normal(size=3)) * 2.0)

    def test_parameter_grad_reset(self, rng):
        p = nx.Parameter(rng.normal(size=(2, 2)))
        nx.backward((p * p).sum())
        p.zero_grad()
        assert p.grad.shape == p.data.shape and not p.grad.any()

    def test_gradients_accumulate_over_reuse(self, rng):
        x = nx.Parameter(rng.normal(size=3))
        nx.backward((x * x + x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_is_an_error(self):
        with pytest.raises(FloatingPointError):
            Tensor([0.0, 1.0]).log()
        with pytest.raises(FloatingPointError):
            Tensor([1.0]) / Tensor([0.0])


ELEMENTWISE = {
    "add": lambda x, y: (x + y * 2.0).sum(),
    "sub": lambda x, y: ((x - y) ** 2).sum(),
    "mul": lambda x, y: (x * y).sum(),
    "div": lambda x, y: (x / (y * y + 1.0)).sum(),
    "broadcast": lambda x, y: (x * y[0:1, :] + y.sum(axis=0, keepdims=True)).mean(),
    "exp_tanh": lambda x, y: (x.exp() * y.tanh()).sum(),
    "log_sqrt": lambda x, y: ((x * x + 1.0).log() + (y * y + 0.5).sqrt()).sum(),
    "sigmoid_silu": lambda x, y: (x.sigmoid() * y.silu()).sum(),
    "softmax": lambda x, y: (x.softmax(-1) * y).sum(),
    "masked_softmax": lambda x, y: (x.softmax(-1, mask=np.tril(np.ones((3, 4), bool))) * y).sum(),
    "reshape_transpose": lambda x, y: (x.reshape(4, 3).transpose() * y).sum(),
    "getitem": lambda x, y: (x[1:, ::2] * y[:2, [0, 2]]).sum() + x[[0, 0, 2], [1, 1, 3]].sum(),
    "concat": lambda x, y: (nx.concat([x, y * 3.0], axis=0) ** 2).sum(),
    "batched_matmul": lambda x, y: (nx.matmul(x.reshape(1, 3, 4), y.T.reshape(1, 4, 3) * 1.0) ** 2).sum(),
    "bce": lambda x, y: nx.bce_with_logits(x * y, np.eye(3, 4) > 0),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_op_gradients(name, rng):
    assert gradcheck(ELEMENTWISE[name], [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]) < 1e-4


@pytest.mark.parametrize("kind", ["causal", "bidirectional"])
def test_transformer_gradient(rng, kind):
    model = nx.Transformer(2, 8, 12, 2, rng)
    params = dict(model.named_parameters())
    w = rng.normal(size=(2, 5, 8))
    x0 = rng.normal(size=(2, 5, 8))
    key_mask = np.array([[True] * 5, [True, True, True, False, True]])

    def build(x):
        return (model(x, kind, key_mask=key_mask) * Tensor(w)).sum()

    assert gradcheck(build, [x0]) < 1e-4
    # parameter gradients for a couple of weights
    for name in ("blocks.0.qkv.weight", "blocks.1.fc2.weight", "norm.gain"):
        p = params[name]
        model.zero_grad()
        nx.backward(build(Tensor(x0)))
        analytic = p.grad.copy()

        def f():
            with nx.no_grad():
                return float(build(Tensor(x0)).data)

        num = nx.finite_difference_grad(f, p.data)
        assert np.abs(num - analytic).max() / max(np.abs(num).max(), 1e-8) < 1e-4, name


def test_kv_cache_matches_full_forward(rng):
    model = nx.Transformer(2, 8, 16, 2, rng)
    x = rng.normal(size=(3, 7, 8))
    full = model(Tensor(x), "causal").data
    cache = nx.KVCache()
    parts = [model(Tensor(x[:, :3]), "causal", cache=cache).data]
    for i in range(3, 7):
        parts.append(model(Tensor(x[:, i : i + 1]), "causal", cache=cache).data)
    np.testing.assert_allclose(np.concatenate(parts, axis=1), full, atol=1e-10)


def test_no_grad_records_nothing(rng):
    p = nx.Parameter(rng.normal(size=3))
    with nx.no_grad():
        y = p * 2.0
    assert not y.requires_grad and y._parents == ()


def test_float32_mode(rng):
    lin = nx.Linear(4, 3, rng, dtype=np.float32)
    y = lin(Tensor(rng.normal(size=(2, 4)).astype(np.float32)))
    assert y.dtype == np.float32
