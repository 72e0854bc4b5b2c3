import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from consisaug import autodiff as ad
from consisaug.errors import DomainError, EmptyReduction, NoTape, NotScalar, ShapeMismatch, TapeConsumed


def grads_of(fn, *tensors):
    for t in tensors:
        t.grad = None
    with ad.Tape() as tape:
        ad.backward(fn(), tape)
    return [t.grad for t in tensors]


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])

    def test_relu(self):
        np.testing.assert_array_equal(ad.relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])

    def test_relu_keeps_nan(self):
        assert np.isnan(ad.relu([np.nan]).data[0])

    def test_sigmoid_zero(self):
        assert ad.sigmoid([0.0]).data[0] == 0.5

    def test_sigmoid_extremes_do_not_overflow(self):
        with np.errstate(over="raise"):
            out = ad.sigmoid([-1000.0, 1000.0]).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_dispatch(self):
        assert ad.elementwise("square", ad.Tensor(3.0)).item() == 9.0
        assert ad.elementwise("div", 1.0, 4.0).item() == 0.25
        with pytest.raises(ValueError):
            ad.elementwise("tanh", 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(np.zeros(2), np.zeros(3))
        with pytest.raises(ShapeMismatch):
            ad.mul(np.zeros((2, 1)), np.zeros((2, 2)))

    def test_scalar_broadcast_gradient(self):
        a = ad.Tensor(2.0, requires_grad=True)
        x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ga, gx = grads_of(lambda: ad.sum(ad.mul(a, x)), a, x)
        assert ga == pytest.approx(6.0)
        np.testing.assert_array_equal(gx, [2.0, 2.0, 2.0])

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ad.log([1.0, 0.0])
        with ad.strict_log(False), np.errstate(divide="ignore"):
            assert ad.log([0.0]).data[0] == -np.inf


class TestMatmul:
    def test_identity(self):
        np.testing.assert_array_equal(ad.matmul(np.eye(2), np.eye(2)).data, np.eye(2))

    def test_product(self):
        assert ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_gradient_matches_finite_difference_oracle(self):
        # central differences with h = 1e-6 give [[5, 9], [5, 9]]
        a = ad.Tensor(np.eye(2), requires_grad=True)
        b = ad.Tensor([[2.0, 3.0], [4.0, 5.0]])
        (ga,) = grads_of(lambda: ad.sum(ad.matmul(a, b)), a)
        np.testing.assert_allclose(ga, [[5.0, 9.0], [5.0, 9.0]], rtol=1e-12)

    def test_inner_dimension(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestConv2d:
    def test_scaling_kernel(self):
        out = ad.conv2d(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 2.0))

    def test_delta_kernel_is_identity(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(ad.conv2d(x, k, padding=1).data, x)

    def test_cross_correlation_convention(self):
        x = np.zeros((1, 3, 3))
        x[0, 1, 2] = 1.0  # right of center
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 2] = 1.0  # unflipped kernel picks the right neighbour
        assert ad.conv2d(x, k, padding=1).data[0, 1, 1] == 1.0

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 7, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ad.conv2d(x, k, b, stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for o in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o]) + b[o]
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_batched_equals_per_image(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 2, 8, 8))
        k = rng.normal(size=(4, 2, 3, 3))
        batched = ad.conv2d(x, k, stride=2, padding=1).data
        for n in range(3):
            np.testing.assert_allclose(batched[n], ad.conv2d(x[n], k, stride=2, padding=1).data, rtol=1e-13)

    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        x = ad.Tensor(rng.normal(size=(2, 5, 5)))
        k = ad.Tensor(rng.normal(size=(3, 2, 3, 3)))
        assert ad.grad_check(lambda t: ad.sum(ad.square(ad.conv2d(t, k, padding=1))), x) < 1e-4
        assert ad.grad_check(lambda t: ad.sum(ad.square(ad.conv2d(x, t, padding=1))), k) < 1e-4

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeMismatch):
            ad.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))

    def test_empty_output_rejected(self):
        with pytest.raises(ShapeMismatch):
            ad.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax([0.0, 0.0]).data, [0.5, 0.5])

    def test_no_overflow(self):
        np.testing.assert_allclose(ad.softmax([1000.0, 1000.0]).data, [0.5, 0.5])

    def test_closed_form(self):
        np.testing.assert_allclose(ad.softmax([np.log(2.0), 0.0]).data, [2 / 3, 1 / 3], rtol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100))
    def test_sums_to_one_and_shift_invariant(self, xs, c):
        x = np.array([xs, xs[::-1]])
        y = ad.softmax(x, axis=1).data
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(ad.softmax(x + c, axis=1).data, y, atol=1e-12)

    def test_log_softmax_consistent(self):
        x = np.random.default_rng(1).normal(size=(4, 3))
        np.testing.assert_allclose(np.exp(ad.log_softmax(x, 1).data), ad.softmax(x, 1).data, rtol=1e-13)


class TestReduce:
    def test_examples(self):
        assert ad.mean([1.0, 2.0, 3.0]).item() == 2.0
        np.testing.assert_array_equal(ad.sum([[1.0, 2.0], [3.0, 4.0]], 0).data, [4.0, 6.0])
        assert ad.max([-5.0, -1.0]).item() == -1.0

    def test_empty(self):
        with pytest.raises(EmptyReduction):
            ad.sum(np.zeros((0, 3)), 0)

    def test_repeated_axes(self):
        with pytest.raises(ValueError):
            ad.sum(np.zeros((2, 3)), (1, -1))


class TestBackward:
    def test_square_sum(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        (g,) = grads_of(lambda: ad.sum(ad.square(x)), x)
        np.testing.assert_array_equal(g, [2.0, 4.0])

    def test_constant_loss_gives_zero_grads(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            ad.sum(ad.square(x))  # x is on the tape
            ad.backward(ad.Tensor(3.0), tape)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_node_used_twice_accumulates(self):
        x = ad.Tensor([1.5, -2.0], requires_grad=True)
        (g_mul,) = grads_of(lambda: ad.sum(ad.mul(x, x)), x)
        (g_sq,) = grads_of(lambda: ad.sum(ad.square(x)), x)
        np.testing.assert_array_equal(g_mul, g_sq)

    def test_not_scalar(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape(), pytest.raises(NotScalar):
            ad.backward(ad.square(x))

    def test_no_tape(self):
        with pytest.raises(NoTape):
            ad.backward(ad.sum(ad.Tensor([1.0], requires_grad=True)))

    def test_repeat_without_reset(self):
        x = ad.Tensor(2.0, requires_grad=True)
        with ad.Tape():
            loss = ad.square(x)
            ad.backward(loss)
            with pytest.raises(TapeConsumed):
                ad.backward(loss)

    def test_untaped_tensor_never_accumulates(self):
        x = ad.Tensor([1.0], requires_grad=True)
        y = ad.Tensor([2.0], requires_grad=True)
        with ad.Tape() as tape:
            ad.backward(ad.sum(ad.square(x)), tape)
        ad.sum(ad.square(y))  # outside any tape
        assert y.grad is None

    def test_detach_blocks_gradient(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            d = ad.detach(ad.square(x))
            ad.backward(ad.sum(ad.mul(x, d)), tape)
        np.testing.assert_array_equal(x.grad, [1.0, 4.0])

    def test_tape_is_topological(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            ad.sum(ad.exp(ad.mul(ad.square(x), x)))
        for idx, (out, parents, _) in enumerate(tape.nodes):
            assert out.tape_id == (tape, idx)
            assert all(p.tape_id is None or p.tape_id[1] < idx for p in parents)

    def test_replay_is_bit_identical(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(2, 6, 6))
        k0 = rng.normal(size=(2, 2, 3, 3))

        def run():
            k = ad.Tensor(k0, requires_grad=True)
            (g,) = grads_of(lambda: ad.sum(ad.sigmoid(ad.conv2d(x0, k, padding=1))), k)
            return g

        assert run().tobytes() == run().tobytes()


class TestGradCheck:
    def test_linear_is_exact(self):
        x = ad.Tensor(np.random.default_rng(0).normal(size=5))
        assert ad.grad_check(lambda t: ad.sum(t), x, 1e-5) < 1e-10

    def test_sigmoid(self):
        x = ad.Tensor(np.random.default_rng(1).uniform(-2, 2, size=8))
        assert ad.grad_check(lambda t: ad.sum(ad.sigmoid(t)), x, 1e-5) < 1e-6

    def test_detects_wrong_rule(self):
        x = ad.Tensor(np.random.default_rng(2).uniform(-2, 2, size=4))
        with ad.inject_backward_fault("exp"):
            assert ad.grad_check(lambda t: ad.sum(ad.exp(t)), x) > 1e-2
        assert ad.grad_check(lambda t: ad.sum(ad.exp(t)), x) < 1e-6


PRIMITIVES = {
    "add": lambda t, c: ad.add(t, c),
    "sub": lambda t, c: ad.sub(c, t),
    "mul": lambda t, c: ad.mul(t, c),
    "div": lambda t, c: ad.div(c, ad.add(ad.square(t), 1.0)),
    "neg": lambda t, c: ad.neg(t),
    "exp": lambda t, c: ad.exp(t),
    "log": lambda t, c: ad.log(ad.add(ad.square(t), 0.5)),
    "relu": lambda t, c: ad.relu(t),
    "sigmoid": lambda t, c: ad.sigmoid(t),
    "square": lambda t, c: ad.square(t),
    "smooth_l1": lambda t, c: ad.smooth_l1(ad.mul(t, 3.0)),
    "softmax": lambda t, c: ad.softmax(t, 1),
    "log_softmax": lambda t, c: ad.log_softmax(t, 0),
    "sum": lambda t, c: ad.sum(t, 1),
    "mean": lambda t, c: ad.mean(t, 0),
    "max": lambda t, c: ad.max(t, 1),
    "reshape": lambda t, c: ad.reshape(t, (4, 3)),
    "transpose": lambda t, c: ad.transpose(t, (1, 0)),
    "take": lambda t, c: ad.take(t, [2, 0, 2], 1),
    "matmul": lambda t, c: ad.matmul(t, ad.transpose(c, (1, 0))),
}


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = ad.Tensor(rng.uniform(-2, 2, size=(3, 4)))
    c = ad.Tensor(rng.uniform(-2, 2, size=(3, 4)))
    w = rng.normal(size=PRIMITIVES[name](x, c).shape)  # random projection to a scalar
    assert ad.grad_check(lambda t: ad.sum(ad.mul(PRIMITIVES[name](t, c), w)), x, 1e-5) < 1e-4
