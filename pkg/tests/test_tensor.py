"""Tensor core: op correctness against naive oracles, backward vs finite differences."""

import math

import numpy as np
import pytest

from bgfill import tensor as T
from bgfill.errors import DimensionError, NumericError


def rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


class TestElementwise:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(0)
        a = T.Tensor(rand(rng, 3, 4), requires_grad=True)
        b = T.Tensor(rand(rng, 4), requires_grad=True)
        out = (a + b) * 2.0
        out.sum().backward()
        np.testing.assert_allclose(a.grad, np.full((3, 4), 2.0))
        np.testing.assert_allclose(b.grad, np.full(4, 6.0))

    def test_matmul_matches_numpy(self):
        rng = np.random.default_rng(1)
        a, b = rand(rng, 5, 3), rand(rng, 3, 7)
        out = T.Tensor(a) @ T.Tensor(b)
        np.testing.assert_allclose(out.data, a @ b, rtol=1e-6)

    def test_batched_matmul_grad(self):
        rng = np.random.default_rng(2)
        a = T.Tensor(rand(rng, 2, 4, 3), requires_grad=True)
        w = T.Tensor(rand(rng, 3, 5), requires_grad=True)
        (T.matmul(a, w)).sum().backward()
        assert a.grad.shape == (2, 4, 3)
        assert w.grad.shape == (3, 5)
        # broadcast weight grad is the sum over the batch
        g = np.ones((2, 4, 5), dtype=np.float32)
        np.testing.assert_allclose(w.grad, np.einsum("bij,bik->jk", a.data, g), rtol=1e-5)

    def test_matmul_shape_error(self):
        with pytest.raises(DimensionError):
            T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = T.softmax(T.Tensor(rand(rng, 6, 9) * 10.0))
        np.testing.assert_allclose(x.data.sum(axis=-1), np.ones(6), atol=1e-6)

    def test_concat_and_getitem_grads(self):
        a = T.Tensor(np.ones((2, 3), np.float32), requires_grad=True)
        b = T.Tensor(np.ones((2, 2), np.float32), requires_grad=True)
        out = T.concat([a, b], axis=-1)[:, 1:4]
        out.sum().backward()
        np.testing.assert_allclose(a.grad, [[0, 1, 1], [0, 1, 1]])
        np.testing.assert_allclose(b.grad, [[1, 0], [1, 0]])


class TestBackwardVsFiniteDifferences:
    """Every primitive's backward agrees with central differences."""

    @pytest.mark.parametrize(
        "name,builder",
        [
            ("add", lambda p: (p[0] + p[1]).sum()),
            ("mul", lambda p: (p[0] * p[1]).sum()),
            ("matmul", lambda p: T.matmul(p[0], p[1]).sum()),
            ("softmax", lambda p: (T.softmax(p[0]) * p[1]).sum()),
            ("tanh", lambda p: T.tanh(T.matmul(p[0], p[1])).sum()),
            ("gelu", lambda p: T.gelu(T.matmul(p[0], p[1])).sum()),
            ("layer_norm", lambda p: (T.layer_norm(p[0]) * p[1]).sum()),
            ("power", lambda p: ((p[0] * p[0] + 1.0) ** -0.5 * p[1]).sum()),
            ("mean", lambda p: T.tmean(p[0] * p[1])),
        ],
    )
    def test_primitive(self, name, builder):
        rng = np.random.default_rng(hash(name) % 2**32)
        second = (6, 3) if name in ("matmul", "tanh", "gelu") else (4, 6)
        p0 = T.Tensor(rand(rng, 4, 6), requires_grad=True)
        p1 = T.Tensor(rand(rng, *second), requires_grad=True)
        err = T.grad_check(lambda ps: builder(ps), [p0, p1], eps=1e-3, num_samples=24)
        assert err < 1e-2, f"{name}: {err}"

    def test_linear_path_tight_tolerance(self):
        rng = np.random.default_rng(7)
        a = T.Tensor(rand(rng, 4, 5), requires_grad=True)
        b = T.Tensor(rand(rng, 5, 4), requires_grad=True)
        err = T.grad_check(lambda p: T.matmul(p[0], p[1]).sum(), [a, b], eps=1e-3)
        assert err < 1e-4

    def test_conv2d_grad(self):
        rng = np.random.default_rng(8)
        x = T.Tensor(rand(rng, 2, 6, 6, 3), requires_grad=True)
        w = T.Tensor(rand(rng, 3, 3, 3, 4) * 0.3, requires_grad=True)
        err = T.grad_check(
            lambda p: T.gelu(T.conv2d(p[0], p[1], stride=2, padding=1)).sum(),
            [x, w],
            eps=1e-3,
            num_samples=48,
        )
        assert err < 1e-2

    def test_conv2d_matches_loop_oracle(self):
        rng = np.random.default_rng(9)
        x, w = rand(rng, 1, 5, 5, 2), rand(rng, 3, 3, 2, 3)
        out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        expect = np.zeros_like(out)
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                patch = xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
                expect[0, i, j] = np.einsum("klc,klcd->d", patch, w)
        np.testing.assert_allclose(out, expect, rtol=1e-5, atol=1e-6)


class TestGradCheckHarness:
    def test_quadratic_closed_form(self):
        # f(x) = sum(x^2), grad 2x
        x = T.Tensor(np.linspace(0.5, 1.5, 8, dtype=np.float32), requires_grad=True)
        x2 = T.Tensor(x.data.reshape(2, 4), requires_grad=True)
        err = T.grad_check(lambda p: (p[0] * p[0]).sum(), [x2], eps=1e-3)
        assert err < 1e-4

    def test_constant_function_zero_grads(self):
        x = T.Tensor(np.ones(4, np.float32).reshape(2, 2), requires_grad=True)
        err = T.grad_check(lambda p: (p[0] * 0.0).sum() + 3.0, [x], eps=1e-3)
        assert err < 1e-6

    def test_nonfinite_loss_raises(self):
        x = T.Tensor(np.zeros((2, 2), np.float32), requires_grad=True)
        with pytest.raises(NumericError):
            T.grad_check(lambda p: (p[0] * np.inf).sum(), [x])


class TestAttention:
    def test_equal_keys_give_uniform_map(self):
        rng = np.random.default_rng(10)
        q = T.Tensor(rand(rng, 3, 4))
        k = T.Tensor(np.tile(rand(rng, 1, 4), (5, 1)))
        v = T.Tensor(rand(rng, 5, 4))
        out, attn = T.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(attn.data, np.full((3, 5), 0.2), atol=1e-6)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-6)

    def test_single_token_identity(self):
        rng = np.random.default_rng(11)
        q, k, v = (T.Tensor(rand(rng, 1, 4)) for _ in range(3))
        out, attn = T.scaled_dot_attention(q, k, v)
        np.testing.assert_allclose(attn.data, [[1.0]])
        np.testing.assert_allclose(out.data, v.data)

    def test_matches_naive_loop_oracle(self):
        rng = np.random.default_rng(12)
        q, k, v = rand(rng, 3, 4), rand(rng, 3, 4), rand(rng, 3, 4)
        out, _ = T.scaled_dot_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v))
        expect = np.zeros((3, 4))
        for i in range(3):
            logits = np.array([q[i] @ k[j] / math.sqrt(4) for j in range(3)])
            weights = np.exp(logits - logits.max())
            weights /= weights.sum()
            for j in range(3):
                expect[i] += weights[j] * v[j]
        np.testing.assert_allclose(out.data, expect, atol=1e-5)

    def test_output_in_convex_hull_of_values(self):
        rng = np.random.default_rng(13)
        q, k, v = rand(rng, 6, 8), rand(rng, 10, 8), rand(rng, 10, 8)
        out, _ = T.scaled_dot_attention(T.Tensor(q), T.Tensor(k), T.Tensor(v))
        assert (out.data <= v.max(axis=0) + 1e-5).all()
        assert (out.data >= v.min(axis=0) - 1e-5).all()

    def test_nan_input_rejected(self):
        bad = np.full((2, 4), np.nan, np.float32)
        good = np.zeros((2, 4), np.float32)
        with pytest.raises(NumericError):
            T.scaled_dot_attention(T.Tensor(bad), T.Tensor(good), T.Tensor(good))

    def test_key_value_count_mismatch(self):
        with pytest.raises(DimensionError):
            T.scaled_dot_attention(
                T.Tensor(np.zeros((2, 4))), T.Tensor(np.zeros((3, 4))), T.Tensor(np.zeros((2, 4)))
            )

    def test_attention_is_differentiable(self):
        rng = np.random.default_rng(14)
        q = T.Tensor(rand(rng, 3, 4), requires_grad=True)
        k = T.Tensor(rand(rng, 5, 4), requires_grad=True)
        v = T.Tensor(rand(rng, 5, 4), requires_grad=True)

        def f(p):
            out, _ = T.scaled_dot_attention(p[0], p[1], p[2])
            return (out * out).sum()

        assert T.grad_check(f, [q, k, v], eps=1e-3, num_samples=36) < 1e-2


class TestRope:
    def test_zero_coords_identity(self):
        rng = np.random.default_rng(20)
        x = rand(rng, 5, 8)
        coords = np.zeros((5, 2), dtype=int)
        out = T.rope_2d_apply(T.Tensor(x), coords)
        np.testing.assert_array_equal(out.data, x)

    def test_pair_norms_preserved(self):
        rng = np.random.default_rng(21)
        x = rand(rng, 6, 16)
        coords = rng.integers(0, 8, size=(6, 2))
        out = T.rope_2d_apply(T.Tensor(x), coords).data
        before = x.reshape(6, 8, 2)
        after = out.reshape(6, 8, 2)
        np.testing.assert_allclose(
            np.linalg.norm(before, axis=-1), np.linalg.norm(after, axis=-1), atol=1e-6
        )

    def test_relative_shift_invariance_1d(self):
        rng = np.random.default_rng(22)
        for _ in range(100):
            q, k = rand(rng, 1, 8), rand(rng, 1, 8)
            p1, p2, delta = (int(v) for v in rng.integers(0, 12, size=3))
            c = lambda p: np.array([[p, 0]])
            lhs = (
                T.rope_2d_apply(T.Tensor(q), c(p1)).data
                @ T.rope_2d_apply(T.Tensor(k), c(p2)).data.T
            )
            rhs = (
                T.rope_2d_apply(T.Tensor(q), c(p1 + delta)).data
                @ T.rope_2d_apply(T.Tensor(k), c(p2 + delta)).data.T
            )
            assert abs(lhs - rhs) < 1e-5

    def test_inverse_by_negated_coords(self):
        rng = np.random.default_rng(23)
        x = rand(rng, 9, 12)
        coords = rng.integers(0, 6, size=(9, 2))
        fwd = T.rope_2d_apply(T.Tensor(x), coords)
        back = T.rope_2d_apply(fwd, -coords)
        np.testing.assert_allclose(back.data, x, atol=1e-5)

    def test_dim_not_divisible_by_four(self):
        with pytest.raises(DimensionError):
            T.rope_2d_apply(T.Tensor(np.zeros((2, 6))), np.zeros((2, 2), int))

    def test_rope_differentiable(self):
        rng = np.random.default_rng(24)
        x = T.Tensor(rand(rng, 4, 8), requires_grad=True)
        coords = rng.integers(0, 4, size=(4, 2))
        err = T.grad_check(
            lambda p: (T.rope_2d_apply(p[0], coords) ** 2.0).sum(), [x], eps=1e-3, num_samples=32
        )
        assert err < 1e-2


class TestAdaln:
    def test_zero_modulation_is_layer_norm(self):
        rng = np.random.default_rng(30)
        x = T.Tensor(rand(rng, 4, 8))
        zero = T.Tensor(np.zeros(8, np.float32))
        out = T.adaln_modulate(x, zero, zero)
        np.testing.assert_allclose(out.data, T.layer_norm(x).data)

    def test_constant_rows_become_shift(self):
        x = T.Tensor(np.full((3, 8), 2.5, np.float32))
        scale = T.Tensor(np.zeros(8, np.float32))
        shift = T.Tensor(np.arange(8, dtype=np.float32))
        out = T.adaln_modulate(x, scale, shift)
        np.testing.assert_allclose(out.data, np.tile(np.arange(8), (3, 1)), atol=1e-4)

    def test_normalization_statistics(self):
        rng = np.random.default_rng(31)
        x = T.Tensor(rand(rng, 16, 64) * 3.0 + 1.0)
        y = T.layer_norm(x).data
        np.testing.assert_allclose(y.mean(axis=-1), np.zeros(16), atol=1e-4)
        np.testing.assert_allclose(y.var(axis=-1), np.ones(16), atol=1e-3)

    def test_width_mismatch(self):
        x = T.Tensor(np.zeros((2, 8)))
        bad = T.Tensor(np.zeros(4))
        with pytest.raises(DimensionError):
            T.adaln_modulate(x, bad, bad)
