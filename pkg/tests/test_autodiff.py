"""Tensor engine: forward semantics and gradients vs finite differences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracklet_fusion import autodiff as ad
from tracklet_fusion.autodiff import Tape, Tensor
from tracklet_fusion.gradcheck import check_gradients, fixed_projection


def _rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


class TestTensorBasics:
    def test_shape_data_consistency(self):
        t = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert t.shape == (2, 2)
        assert t.size == 4
        assert t.data.dtype == np.float64

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.nan])
        with pytest.raises(ValueError):
            Tensor([np.inf])

    def test_ops_reject_non_finite_results(self):
        a = Tensor([1.0])
        b = Tensor([0.0])
        with pytest.raises(ValueError):
            ad.div(a, b)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)

    def test_orthogonal_rows(self):
        a = Tensor([[1.0, 0.0]])
        b = Tensor([[0.0], [1.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[0.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a = _rand(rng, 3, 4)
        b = _rand(rng, 4, 2)
        r = fixed_projection((3, 2), rng)
        err = check_gradients(lambda: (ad.matmul(a, b) * r).sum(), [a, b])
        assert err < 1e-6


class TestConv2d:
    def test_zero_kernel(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 5, 5)))
        k = Tensor(np.zeros((3, 2, 3, 3)))
        out = ad.conv2d(x, k)
        assert out.shape == (3, 5, 5)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((1, 6, 4)))
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = ad.conv2d(x, Tensor(k))
        np.testing.assert_allclose(out.data, x.data, atol=0)

    def test_stride_two_shape(self):
        x = Tensor(np.zeros((2, 7, 5)))
        k = Tensor(np.zeros((4, 2, 3, 3)))
        assert ad.conv2d(x, k, stride=2).shape == (4, 4, 3)

    def test_batched_matches_per_item(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((3, 2, 5, 4))
        k = Tensor(rng.standard_normal((4, 2, 3, 3)))
        b = Tensor(rng.standard_normal(4))
        batched = ad.conv2d(Tensor(x), k, bias=b)
        for i in range(3):
            single = ad.conv2d(Tensor(x[i]), k, bias=b)
            np.testing.assert_array_equal(batched.data[i], single.data)

    def test_kernel_shape_validation(self):
        with pytest.raises(ValueError):
            ad.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((3, 2, 5, 5))))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = _rand(rng, 2, 5, 5)
        k = _rand(rng, 3, 2, 3, 3)
        b = _rand(rng, 3)
        r = fixed_projection((3, 5, 5), rng)
        err = check_gradients(
            lambda: (ad.conv2d(x, k, bias=b) * r).sum(), [x, k, b])
        assert err < 1e-5

    def test_gradient_stride_two(self):
        rng = np.random.default_rng(5)
        x = _rand(rng, 2, 6, 6)
        k = _rand(rng, 2, 2, 3, 3)
        r = fixed_projection((2, 3, 3), rng)
        err = check_gradients(lambda: (ad.conv2d(x, k, stride=2) * r).sum(), [x, k])
        assert err < 1e-5


class TestPointwise:
    def test_relu(self):
        out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_relu_gradient_zero_at_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.relu(x).sum()
        (g,) = tape.gradients(loss, [x])
        np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extreme_inputs_finite(self):
        out = ad.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] < 1e-300
        assert out.data[1] == 1.0

    def test_binary_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_bias_broadcast_add(self):
        out = ad.add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])

    def test_add_gradient(self):
        rng = np.random.default_rng(6)
        a = _rand(rng, 3, 4)
        b = _rand(rng, 3, 4)
        r = fixed_projection((3, 4), rng)
        err = check_gradients(lambda: ((a + b) * r).sum(), [a, b])
        assert err < 1e-6

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "relu",
                                    "sigmoid", "log", "sqrt", "scale"])
    def test_gradients_many_seeds(self, op):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            a = Tensor(rng.uniform(0.5, 2.0, (3, 2)), requires_grad=True)
            b = Tensor(rng.uniform(0.5, 2.0, (3, 2)), requires_grad=True)
            r = fixed_projection((3, 2), rng)
            builders = {
                "add": lambda: ((a + b) * r).sum(),
                "sub": lambda: ((a - b) * r).sum(),
                "mul": lambda: ((a * b) * r).sum(),
                "div": lambda: (ad.div(a, b) * r).sum(),
                "relu": lambda: ((ad.relu(a - 1.2)) * r).sum(),
                "sigmoid": lambda: (ad.sigmoid(a) * r).sum(),
                "log": lambda: (ad.log(a) * r).sum(),
                "sqrt": lambda: (ad.sqrt(a) * r).sum(),
                "scale": lambda: (ad.scale(a, -2.5) * r).sum(),
            }
            wrt = [a] if op in ("relu", "sigmoid", "log", "sqrt", "scale") else [a, b]
            assert check_gradients(builders[op], wrt) < 1e-4


class TestReductions:
    def test_mean_simple(self):
        assert ad.tmean(Tensor([2.0, 4.0])).item() == 3.0

    def test_sum_axis(self):
        out = ad.tsum(Tensor(np.ones((3, 2))), axis=0)
        np.testing.assert_array_equal(out.data, [3.0, 3.0])

    def test_empty_axis_raises(self):
        with pytest.raises(ValueError):
            ad.tsum(Tensor(np.zeros((0, 2))), axis=0)
        with pytest.raises(ValueError):
            ad.tmean(Tensor(np.zeros((2, 0))), axis=1)

    def test_max_tie_routes_to_first(self):
        x = Tensor([1.0, 3.0, 3.0], requires_grad=True)
        with Tape() as tape:
            loss = ad.tmax(x)
        (g,) = tape.gradients(loss, [x])
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_max_axis_values(self):
        x = Tensor([[1.0, 5.0], [4.0, 2.0]])
        np.testing.assert_array_equal(ad.tmax(x, axis=1).data, [5.0, 4.0])

    def test_mean_gradient_many_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            x = _rand(rng, 4, 3)
            r = fixed_projection((4,), rng)
            err = check_gradients(lambda: (ad.tmean(x, axis=1) * r).sum(), [x])
            assert err < 1e-6

    def test_mean_tuple_axes_gradient(self):
        rng = np.random.default_rng(7)
        x = _rand(rng, 2, 3, 4, 5)
        r = fixed_projection((2, 3), rng)
        err = check_gradients(lambda: (ad.tmean(x, axis=(2, 3)) * r).sum(), [x])
        assert err < 1e-6

    def test_max_gradient(self):
        rng = np.random.default_rng(8)
        x = _rand(rng, 5, 4)
        r = fixed_projection((5,), rng)
        err = check_gradients(lambda: (ad.tmax(x, axis=1) * r).sum(), [x])
        assert err < 1e-6


class TestSoftmax:
    def test_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_single_element(self):
        np.testing.assert_array_equal(ad.softmax(Tensor([7.0]), axis=0).data, [1.0])

    def test_overflow_safe(self):
        # Hand computation in log space: p0 = 1/(1+e^-1), p1 = e^-1/(1+e^-1).
        out = ad.softmax(Tensor([1000.0, 999.0]), axis=0)
        assert np.all(np.isfinite(out.data))
        expected0 = 1.0 / (1.0 + np.exp(-1.0))
        np.testing.assert_allclose(out.data, [expected0, 1.0 - expected0],
                                   rtol=1e-12)
        assert abs(out.data.sum() - 1.0) < 1e-12

    @given(st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_sums_to_one_and_shift_invariant(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-50, 50, (3, 5))
        c = rng.uniform(-100, 100)
        y = ad.softmax(Tensor(x), axis=1).data
        y_shift = ad.softmax(Tensor(x + c), axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(y, y_shift, atol=1e-9)

    def test_gradient_many_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(200 + seed)
            x = _rand(rng, 3, 4)
            r = fixed_projection((3, 4), rng)
            err = check_gradients(lambda: (ad.softmax(x, axis=1) * r).sum(), [x])
            assert err < 1e-4


class TestConcat:
    def test_simple(self):
        out = ad.concat(Tensor([1.0]), Tensor([2.0]))
        np.testing.assert_array_equal(out.data, [1.0, 2.0])

    def test_with_empty(self):
        x = Tensor([1.0, 2.0])
        out = ad.concat(x, Tensor(np.zeros((0,))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_non_concat_dims_must_match(self):
        with pytest.raises(ValueError):
            ad.concat(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), axis=0)

    def test_gradient_many_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(300 + seed)
            a = _rand(rng, 2, 3)
            b = _rand(rng, 4, 3)
            r = fixed_projection((6, 3), rng)
            err = check_gradients(lambda: (ad.concat(a, b, axis=0) * r).sum(), [a, b])
            assert err < 1e-6

    def test_stack(self):
        rows = [Tensor([1.0, 2.0]), Tensor([3.0, 4.0])]
        np.testing.assert_array_equal(ad.stack(rows).data, [[1, 2], [3, 4]])


class TestPairwiseDistances:
    def test_hand_case(self):
        f = Tensor([[0.0, 0.0], [3.0, 4.0]])
        d = ad.pairwise_distances(f)
        np.testing.assert_array_equal(d.data, [[0.0, 5.0], [5.0, 0.0]])

    def test_gradient_zero_rows_safe(self):
        f = Tensor([[1.0, 1.0], [1.0, 1.0]], requires_grad=True)
        with Tape() as tape:
            loss = ad.pairwise_distances(f).sum()
        (g,) = tape.gradients(loss, [f])
        np.testing.assert_array_equal(g, 0.0)

    def test_gradient_many_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(400 + seed)
            f = _rand(rng, 4, 3)
            r = fixed_projection((4, 4), rng)
            err = check_gradients(lambda: (ad.pairwise_distances(f) * r).sum(), [f])
            assert err < 1e-4


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        (g,) = tape.gradients(loss, [x])
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_unused_parameter_gets_zero_grad(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        with Tape() as tape:
            loss = (x * 2.0).sum()
        gx, gu = tape.gradients(loss, [x, unused])
        np.testing.assert_array_equal(gx, [2.0])
        np.testing.assert_array_equal(gu, [0.0])

    def test_reuse_sums_contributions(self):
        rng = np.random.default_rng(9)
        x = _rand(rng, 3)
        with Tape() as tape:
            loss = (x * x).sum()
        (g_twice,) = tape.gradients(loss, [x])

        y = Tensor(x.data.copy(), requires_grad=True)
        with Tape() as t1:
            l1 = (y * Tensor(x.data)).sum()
        (g1,) = t1.gradients(l1, [y])
        with Tape() as t2:
            l2 = (Tensor(x.data) * y).sum()
        (g2,) = t2.gradients(l2, [y])
        np.testing.assert_allclose(g_twice, g1 + g2, atol=1e-14)

    def test_loss_must_be_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = x * 2.0
        with pytest.raises(ValueError):
            tape.backward(out)

    def test_no_tape_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        assert y.requires_grad
        with Tape() as tape:
            pass
        assert len(tape) == 0

    def test_grad_attribute_set(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_chained_composition_gradient(self):
        for seed in range(10):
            rng = np.random.default_rng(500 + seed)
            w = _rand(rng, 4, 3)
            b = _rand(rng, 3)
            x = Tensor(rng.standard_normal((5, 4)))
            r = fixed_projection((5, 3), rng)

            def build():
                h = ad.relu(ad.matmul(x, w) + b)
                return (ad.softmax(h, axis=1) * r).sum()

            assert check_gradients(build, [w, b]) < 1e-4

    def test_reshape_transpose_gradient(self):
        rng = np.random.default_rng(10)
        x = _rand(rng, 3, 4)
        r = fixed_projection((2, 6), rng)
        err = check_gradients(
            lambda: (ad.reshape(ad.transpose(x), (2, 6)) * r).sum(), [x])
        assert err < 1e-6


class TestAvgPool:
    def test_constant_map(self):
        x = Tensor(np.full((2, 4, 4), 3.0))
        out = ad.avg_pool2d(x, 2)
        assert out.shape == (2, 2, 2)
        np.testing.assert_array_equal(out.data, 3.0)

    def test_indivisible_raises(self):
        with pytest.raises(ValueError):
            ad.avg_pool2d(Tensor(np.zeros((1, 5, 4))), 2)

    def test_gradient(self):
        rng = np.random.default_rng(11)
        x = _rand(rng, 2, 4, 6)
        r = fixed_projection((2, 2, 3), rng)
        err = check_gradients(lambda: (ad.avg_pool2d(x, 2) * r).sum(), [x])
        assert err < 1e-6
