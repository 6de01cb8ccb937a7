import math

import numpy as np
import numpy.testing as npt
import pytest

from patkit.core import tensor as T
from patkit.core.nn import Linear, Module, Parameter
from patkit.core.tensor import Tensor
from patkit.errors import ContractError, DimensionError, DomainError


def loop_matmul(a, b):
    m, k = a.shape
    _, p = b.shape
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        b = np.array([[1.0, 2], [3, 4]])
        npt.assert_array_equal(T.matmul(np.eye(2), b).data, b)

    def test_permutation(self):
        p = np.array([[0.0, 1], [1, 0]])
        npt.assert_array_equal(T.matmul(np.eye(2), p).data, p)

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        with T.precision(np.float64):
            out = T.matmul(a, b).data
        assert np.max(np.abs(out - loop_matmul(a, b))) < 1e-6

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(np.ones((2, 3)), np.ones((4, 5)))

    def test_gradients_follow_transpose_rule(self):
        rng = np.random.default_rng(1)
        with T.precision(np.float64):
            a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
            g = rng.normal(size=(3, 2))
            T.backward((T.matmul(a, b) * Tensor(g)).sum())
        npt.assert_allclose(a.grad, g @ b.data.T)
        npt.assert_allclose(b.grad, a.data.T @ g)


class TestSoftmax:
    def test_symmetric_pair(self):
        npt.assert_allclose(T.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])

    def test_closed_form(self):
        with T.precision(np.float64):
            out = T.softmax(np.array([math.log(2), 0.0])).data
        npt.assert_allclose(out, [2 / 3, 1 / 3], rtol=1e-12)

    def test_large_input_stays_finite(self):
        out = T.softmax(np.array([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        npt.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one_and_ignore_shift(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-10, 10, size=(20, 9))
        with T.precision(np.float64):
            a = T.softmax(x).data
            b = T.softmax(x + rng.normal(size=(20, 1)) * 100).data
        npt.assert_allclose(a.sum(-1), 1, atol=1e-6)
        npt.assert_allclose(a, b, atol=1e-12)


class TestElu:
    @pytest.mark.parametrize("x, y", [(0.0, 0.0), (1.0, 1.0)])
    def test_fixed_points(self, x, y):
        assert T.elu(np.array([x])).data[0] == y

    def test_lower_asymptote(self):
        with T.precision(np.float64):
            v = T.elu(np.array([-20.0])).data[0]
        assert -1 < v < -1 + 1e-8

    def test_gradient_is_one_or_exp(self):
        with T.precision(np.float64):
            x = Tensor(np.array([-1.5, -0.2, 0.3, 2.0]), requires_grad=True)
            T.backward(T.elu(x).sum())
        npt.assert_allclose(x.grad, [math.exp(-1.5), math.exp(-0.2), 1, 1])


class TestReduce:
    def test_max_value_and_mask(self):
        x = Tensor(np.array([1.0, 5.0, 3.0]), requires_grad=True)
        out = T.reduce(x, "max", axis=0)
        assert out.item() == 5
        T.backward(out)
        npt.assert_array_equal(x.grad, [0, 1, 0])

    def test_max_tie_goes_to_first(self):
        x = Tensor(np.array([[2.0, 7, 7, 1]]), requires_grad=True)
        T.backward(T.reduce(x, "max", axis=1).sum())
        npt.assert_array_equal(x.grad, [[0, 1, 0, 0]])

    def test_multi_axis_max_tie_goes_to_first(self):
        x = Tensor(np.array([[[3.0, 1], [3, 0]]]), requires_grad=True)
        T.backward(T.reduce(x, "max", axis=(1, 2)).sum())
        npt.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])

    def test_mean(self):
        assert T.reduce(np.array([2.0, 4.0]), "mean").item() == 3

    def test_sum_vs_sequential_loop(self):
        rng = np.random.default_rng(3)
        v = rng.uniform(size=1000)
        acc = 0.0
        for x in v:
            acc += x
        with T.precision(np.float64):
            s = T.reduce(v, "sum").item()
        assert abs(s - acc) / acc < 1e-6

    def test_empty_axis_rejected(self):
        with pytest.raises(ContractError):
            T.reduce(np.zeros((3, 0)), "sum", axis=1)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            T.reduce(np.ones(3), "median")


class TestElementwise:
    def test_log_exp_inverse(self):
        x = np.array([-2.0, 0.0, 3.0])
        with T.precision(np.float64):
            npt.assert_allclose(T.log(T.exp(x)).data, x, atol=1e-12)

    def test_broadcast_add_rank(self):
        out = T.add(np.ones((4, 1)), np.ones((1, 5)))
        assert out.shape == (4, 5)

    def test_broadcast_gradient_is_summed(self):
        a = Tensor(np.ones((4, 1)), requires_grad=True)
        b = Tensor(np.ones((1, 5)), requires_grad=True)
        T.backward(T.add(a, b).sum())
        npt.assert_array_equal(a.grad, np.full((4, 1), 5.0))
        npt.assert_array_equal(b.grad, np.full((1, 5), 4.0))

    def test_chain_vs_pointwise_oracle(self):
        rng = np.random.default_rng(4)
        x, y = rng.uniform(0.5, 2, size=10), rng.uniform(0.5, 2, size=10)
        with T.precision(np.float64):
            out = T.div(T.mul(T.exp(T.neg(x)), T.log(y)), T.sub(x, -1.0)).data
        expect = [math.exp(-a) * math.log(b) / (a + 1) for a, b in zip(x, y)]
        npt.assert_allclose(out, expect, rtol=1e-12)

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(np.array([1.0, 0.0]))
        with pytest.raises(DomainError):
            T.log(np.array([-1.0]))

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            T.div(np.ones(2), np.array([1.0, 0.0]))


class TestShapes:
    def test_reshape_round_trip_is_exact(self):
        x = np.arange(6.0).reshape(2, 3)
        npt.assert_array_equal(T.reshape(T.reshape(x, (3, 2)), (2, 3)).data, x)

    def test_transpose_twice(self):
        x = np.random.default_rng(5).normal(size=(2, 3, 4)).astype(np.float32)
        y = T.transpose(T.transpose(x, (2, 0, 1)), (1, 2, 0)).data
        npt.assert_array_equal(y, x)

    def test_transpose_materializes(self):
        y = T.transpose(np.ones((3, 4)))
        assert y.data.flags["C_CONTIGUOUS"]

    def test_concat_slices_recover_inputs(self):
        a, b = np.ones((3, 2)), np.zeros((3, 4))
        c = T.concat([a, b], axis=-1).data
        assert c.shape == (3, 6)
        npt.assert_array_equal(c[:, :2], a)
        npt.assert_array_equal(c[:, 2:], b)

    def test_reshape_count_mismatch(self):
        with pytest.raises(DimensionError):
            T.reshape(np.ones(6), (4, 2))

    def test_concat_off_axis_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat([np.ones((3, 2)), np.ones((4, 2))], axis=-1)

    def test_gather_rows_repeated_index_accumulates(self):
        x = Tensor(np.arange(6.0).reshape(1, 3, 2), requires_grad=True)
        out = T.gather_rows(x, np.array([[2, 2, 0]]))
        npt.assert_array_equal(out.data[0], [[4, 5], [4, 5], [0, 1]])
        T.backward(out.sum())
        npt.assert_array_equal(x.grad[0], [[1, 1], [0, 0], [2, 2]])


class TestBackward:
    def test_linear_sum(self):
        x = np.array([[1.0], [-2.0], [3.0]])
        w = Tensor(np.ones((2, 3)), requires_grad=True)
        T.backward(T.matmul(w, x).sum())
        npt.assert_array_equal(w.grad, np.stack([x[:, 0], x[:, 0]]))

    def test_cross_entropy_closed_form(self):
        logits = Tensor(np.zeros((1, 2)), requires_grad=True)
        loss = T.cross_entropy(logits, np.array([0]))
        assert loss.item() == pytest.approx(math.log(2))
        T.backward(loss)
        npt.assert_allclose(logits.grad, [[-0.5, 0.5]])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ContractError):
            T.backward(Tensor(np.ones(3), requires_grad=True) * 2)

    def test_unreachable_parameter_gets_zero(self):
        a = Parameter(np.ones(3))
        b = Parameter(np.ones(2))
        grads = T.backward((a * 2).sum(), [a, b])
        npt.assert_array_equal(grads[b], np.zeros(2))
        npt.assert_array_equal(b.grad, np.zeros(2))

    def test_second_pass_is_identical(self):
        rng = np.random.default_rng(6)
        lin = Linear(4, 3, rng)
        x = rng.normal(size=(5, 4))
        loss = T.reduce(T.softmax(lin(x)), "max", axis=-1).sum()
        first = {k: v.copy() for k, v in T.backward(loss, lin.parameters()).items()}
        second = T.backward(loss, lin.parameters())
        for p in lin.parameters():
            npt.assert_array_equal(first[p], second[p])

    def test_nodes_processed_in_reverse_creation_order(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = x * 3
        z = y * y + y
        assert y.node_id < z.node_id
        T.backward(z)
        assert x.grad == pytest.approx(2 * 6 * 3 + 3)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 2
        assert not y.requires_grad


class TestPrecision:
    def test_default_is_32_bit(self):
        assert Tensor([1.0]).dtype == np.float32

    def test_context_switches_and_restores(self):
        with T.precision(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert T.get_default_dtype() == np.float32


class _Tiny(Module):
    def __init__(self, rng):
        self.first = Linear(2, 2, rng)
        self.stack = [Linear(2, 2, rng), Linear(2, 1, rng)]


class TestModules:
    def test_dotted_names(self):
        names = [n for n, _ in _Tiny(np.random.default_rng(0)).named_parameters()]
        assert names == [
            "first.weight",
            "first.bias",
            "stack.0.weight",
            "stack.0.bias",
            "stack.1.weight",
            "stack.1.bias",
        ]

    def test_shared_parameter_rejected(self):
        m = _Tiny(np.random.default_rng(0))
        m.stack[1].weight = m.first.weight
        with pytest.raises(ContractError):
            m.parameters()

    def test_glorot_bounds(self):
        lin = Linear(30, 20, np.random.default_rng(0))
        assert np.abs(lin.weight.data).max() <= math.sqrt(6 / 50)
        assert not lin.bias.data.any()
