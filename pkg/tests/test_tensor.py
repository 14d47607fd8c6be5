import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from omnifuse import tensor as T
from omnifuse.errors import ConfigError, ContractError, ShapeError
from omnifuse.gradcheck import check_gradients
from omnifuse.nn import MultiHeadAttention
from omnifuse.tensor import Tensor

from oracles import attention_ref, finite_diff, gelu_ref, layer_norm_ref, rel_err, softmax_ref


def leaf(rng, *shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def projected(out: Tensor, seed=0):
    """Scalar loss through a fixed random projection; a plain sum hides many bugs."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * w).sum()


def assert_grads(fn, leaves, tol=1e-4):
    results = check_gradients(lambda: projected(fn()), dict(enumerate(leaves)), max_entries=None)
    for r in results:
        assert r.rel_error < tol, f"input {r.name}: rel err {r.rel_error:.2e}"


class TestTensorType:
    def test_shape_and_size(self):
        t = Tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3) and t.size == 6 and t.ndim == 2

    def test_zero_dimension_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 0)))

    def test_grad_matches_shape(self, rng):
        a = leaf(rng, 3, 4)
        projected(a * 2.0).backward()
        assert a.grad.shape == a.shape

    def test_precision_knob(self):
        T.set_precision("f32")
        assert Tensor([1.0]).data.dtype == np.float32
        T.set_precision("f64")
        assert Tensor([1.0]).data.dtype == np.float64
        with pytest.raises(ConfigError):
            T.set_precision("bf16")


class TestMatmul:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 4))
        assert np.array_equal((Tensor(np.eye(3)) @ Tensor(x)).data, x)

    def test_hand_example(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[0.0, 1.0], [1.0, 0.0]])
        assert out.data.tolist() == [[2.0, 1.0], [4.0, 3.0]]

    def test_sum_gradient_is_ones_times_b_transpose(self, rng):
        a, b = leaf(rng, 5, 7), leaf(rng, 7, 2)
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((5, 2)) @ b.data.T, rtol=1e-12)
        fd = finite_diff(lambda x: float((x @ b.data).sum()), a.data)
        assert rel_err(a.grad, fd) < 1e-8

    def test_gradients_both_operands(self, rng):
        a, b = leaf(rng, 5, 7), leaf(rng, 7, 2)
        assert_grads(lambda: a @ b, [a, b])

    def test_batched_broadcast(self, rng):
        a, b = leaf(rng, 3, 4, 5), leaf(rng, 5, 2)
        assert (a @ b).shape == (3, 4, 2)
        assert_grads(lambda: a @ b, [a, b])

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 5)))


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    def test_one_matches_normal_cdf(self):
        # Phi(1) from the normal-CDF oracle, rounded to 7 places: 0.8413447
        assert T.gelu(Tensor([1.0])).data[0] == pytest.approx(0.8413447, abs=5e-8)

    def test_far_negative_tail(self):
        assert abs(T.gelu(Tensor([-10.0])).data[0]) < 1e-9

    def test_against_oracle(self, rng):
        x = rng.uniform(-4, 4, 50)
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, gelu_ref(x), rtol=1e-12, atol=1e-15)

    def test_gradient(self, rng):
        x = leaf(rng, 4, 6)
        assert_grads(lambda: T.gelu(x), [x])


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        out = T.layer_norm(Tensor(np.full((1, 8), 3.0)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.all(out.data == 0.0)

    def test_mean_and_std(self, rng):
        x = rng.uniform(-2, 2, (6, 32))
        out = T.layer_norm(Tensor(x), Tensor(np.full(32, 1.5)), Tensor(np.full(32, 0.25)))
        assert np.all(np.abs(out.data.mean(axis=-1) - 0.25) < 1e-10)
        np.testing.assert_allclose(out.data.std(axis=-1), 1.5, rtol=1e-4)

    def test_against_oracle(self, rng):
        x, g, b = rng.uniform(-2, 2, (3, 5)), rng.uniform(-2, 2, 5), rng.uniform(-2, 2, 5)
        out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b))
        np.testing.assert_allclose(out.data, layer_norm_ref(x, g, b), rtol=1e-10, atol=1e-12)

    def test_gradient(self, rng):
        x, g, b = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
        assert_grads(lambda: T.layer_norm(x, g, b), [x, g, b])

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor(np.full((2, 5), 0.7)))
        assert np.allclose(out.data, 0.2, rtol=0, atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        out = T.softmax(Tensor(rng.uniform(-30, 30, (10, 17))))
        assert np.all(np.abs(out.data.sum(axis=-1) - 1) < 1e-12)
        assert np.all(out.data > 0)

    def test_shift_invariance_bit_exact(self, rng):
        # Dyadic inputs and shifts keep x + c exact, so max-subtraction gives identical bits.
        x = rng.integers(-64, 64, (4, 9)) / 8.0
        for c in (1.0, -3.5, 1024.0):
            assert np.array_equal(T.softmax(Tensor(x + c)).data, T.softmax(Tensor(x)).data)

    def test_shift_invariance_general(self, rng):
        x = rng.uniform(-2, 2, (4, 9))
        np.testing.assert_allclose(T.softmax(Tensor(x + 0.1234)).data, T.softmax(Tensor(x)).data,
                                   rtol=1e-13)

    def test_against_oracle(self, rng):
        x = rng.uniform(-5, 5, 7)
        np.testing.assert_allclose(T.softmax(Tensor(x)).data, softmax_ref(list(x)), rtol=1e-13)

    def test_gradient(self, rng):
        x = leaf(rng, 3, 5)
        assert_grads(lambda: T.softmax(x, axis=-1), [x])
        assert_grads(lambda: T.softmax(x, axis=0), [x])


class TestAttention:
    def test_query_length_sets_output_length(self, rng):
        mha = MultiHeadAttention(8, 4, rng)
        out = mha(Tensor(rng.standard_normal((576, 8))), Tensor(rng.standard_normal((832, 8))))
        assert out.shape == (576, 8)

    def test_single_key_returns_projected_value(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        q, kv = Tensor(rng.standard_normal((3, 8))), Tensor(rng.standard_normal((1, 8)))
        expected = (kv.data @ mha.v_proj.weight.data) @ mha.o_proj.weight.data + mha.o_proj.bias.data
        np.testing.assert_allclose(mha(q, kv).data, np.repeat(expected, 3, axis=0), rtol=1e-12)

    @pytest.mark.parametrize("causal", [False, True])
    def test_against_loop_oracle(self, rng, causal):
        q, k, v = (rng.uniform(-2, 2, (5, 8)) for _ in range(3))
        out = T.attention_heads(Tensor(q), Tensor(k), Tensor(v), 2, causal)
        np.testing.assert_allclose(out.data, attention_ref(q, k, v, 2, causal), rtol=1e-11)

    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ConfigError):
            T.attention_heads(Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))),
                              Tensor(np.ones((2, 6))), 4)
        with pytest.raises(ConfigError):
            MultiHeadAttention(6, 4, rng)

    def test_gradient_small(self, rng):
        q, k, v = leaf(rng, 4, 8), leaf(rng, 6, 8), leaf(rng, 6, 8)
        wq, wk, wv, wo, bo = leaf(rng, 8, 8), leaf(rng, 8, 8), leaf(rng, 8, 8), leaf(rng, 8, 8), leaf(rng, 8)
        assert_grads(lambda: T.multi_head_attention(q, k, v, 2, wq, wk, wv, wo, bo),
                     [q, k, v, wq, wk, wv, wo, bo])

    def test_causal_mask_shape(self):
        m = T.causal_mask(3, 3)
        assert m.tolist() == [[False, True, True], [False, False, True], [False, False, False]]


class TestOtherOps:
    @pytest.mark.parametrize("op", [T.add, T.sub, T.mul, T.div])
    def test_binary_broadcast_gradients(self, rng, op):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, low=0.5, high=2.0)
        assert_grads(lambda: op(a, b), [a, b])

    def test_reshape_transpose_getitem(self, rng):
        a = leaf(rng, 2, 3, 4)
        assert_grads(lambda: a.reshape(6, 4).transpose(1, 0)[1:3], [a])

    def test_concat_stack_pad(self, rng):
        a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
        assert_grads(lambda: T.pad(T.concat([a, b], axis=0), 0, 1, 2), [a, b])
        c = leaf(rng, 2, 3)
        assert_grads(lambda: T.stack([a, c], axis=1), [a, c])

    def test_take_rows_accumulates_repeats(self, rng):
        table = leaf(rng, 5, 3)
        assert_grads(lambda: T.take_rows(table, [0, 2, 2, 4]), [table])

    def test_mean(self, rng):
        a = leaf(rng, 3, 4)
        assert_grads(lambda: a.mean(axis=0), [a])

    def test_cross_entropy_gradient(self, rng):
        logits = leaf(rng, 2, 4, 6)
        targets = rng.integers(0, 6, (2, 4))
        mask = np.array([[1, 0, 1, 1], [0, 1, 1, 0]], dtype=bool)
        results = check_gradients(lambda: T.cross_entropy(logits, targets, mask), {"l": logits},
                                  max_entries=None)
        assert results[0].rel_error < 1e-6

    def test_cross_entropy_all_masked(self):
        with pytest.raises(ContractError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [False, False])


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x).sum().backward()
        assert x.grad.tolist() == [6.0]

    def test_linearity(self, rng):
        a, b = leaf(rng, 3, 4), Tensor(rng.standard_normal((4, 2)))
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)

    def test_non_scalar_loss_rejected(self, rng):
        with pytest.raises(ContractError):
            leaf(rng, 2, 2).backward()

    def test_shared_subexpression_visited_once(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        (y + y + y).sum().backward()  # d/dx 3x^2 = 12
        assert x.grad.tolist() == [12.0]

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        assert x.grad.tolist() == [1.0]

    def test_no_grad_records_nothing(self, rng):
        a = leaf(rng, 2, 2)
        with T.no_grad():
            out = a * 2.0
        assert not out.requires_grad

    def test_deterministic(self, rng):
        x = rng.standard_normal((4, 8))
        runs = [T.softmax(T.gelu(Tensor(x)) @ Tensor(x.T)).data for _ in range(2)]
        assert np.array_equal(*runs)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-2, 2)))
def test_finite_outputs_on_finite_inputs(x):
    t = Tensor(x)
    for out in (T.gelu(t), T.softmax(t), T.layer_norm(t, Tensor(np.ones(x.shape[-1])),
                                                      Tensor(np.zeros(x.shape[-1])))):
        assert np.all(np.isfinite(out.data))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_broadcast_add_gradient_shapes(m, n, k, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((m, n, k)), requires_grad=True)
    b = Tensor(rng.standard_normal((n, 1)), requires_grad=True)
    projected(a + b, seed).backward()
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert math.isclose(float(b.grad.sum()), float(a.grad.sum()), rel_tol=1e-9, abs_tol=1e-9)
