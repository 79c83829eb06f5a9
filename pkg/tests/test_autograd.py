import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from irab import autograd as ag
from irab.autograd import Tape, Tensor, grad_check
from irab.errors import ShapeError


def naive_conv2d(x, w, b, stride, padding, dilation):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (w[oi, ci, ki, kj]
                                        * xp[ni, ci, i * stride + ki * dilation, j * stride + kj * dilation])
                    out[ni, oi, i, j] = acc + b[oi]
    return out


def brute_pool(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for b in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[a, b, i, j] = max(x[a, b, 2 * i + di, 2 * j + dj] for di in (0, 1) for dj in (0, 1))
    return out


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(ag.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_scale_by_zero(self):
        np.testing.assert_array_equal(ag.elementwise("scale", Tensor([1, 2]), 0).data, [0, 0])

    def test_mul_grad(self):
        a = Tensor([2.0, 3.0], requires_grad=True)
        b = Tensor([4.0, 5.0], requires_grad=True)
        y = ag.elementwise("mul", a, b)
        np.testing.assert_array_equal(y.data, [8, 15])
        ag.backward(ag.sum(y))
        np.testing.assert_array_equal(a.grad, [4, 5])
        assert grad_check(lambda t: ag.sum(ag.mul(t, Tensor([4.0, 5.0]))), Tensor([2.0, 3.0])) < 1e-9

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            ag.add(Tensor([1, 2]), Tensor([1, 2, 3]))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ag.elementwise("div", Tensor([1.0]), Tensor([1.0]))

    def test_scalar_operands(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = ag.sum(2.0 - x * 3.0 + 1.0)
        ag.backward(y)
        np.testing.assert_array_equal(x.grad, [-3.0, -3.0])


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 5, 6))
        y = ag.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        np.testing.assert_array_equal(y.data, x)

    def test_hand_cross_correlation(self):
        y = ag.conv2d(Tensor([[[[1, 2], [3, 4]]]]), Tensor(np.ones((1, 1, 2, 2))))
        np.testing.assert_array_equal(y.data, [[[[10.0]]]])

    def test_zero_input(self):
        w = np.random.default_rng(1).normal(size=(3, 2, 3, 3))
        y = ag.conv2d(Tensor(np.zeros((1, 2, 6, 6))), Tensor(w), Tensor(np.zeros(3)), padding=1)
        assert not y.data.any()

    @pytest.mark.parametrize("stride,padding,dilation", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 2, 2)])
    def test_matches_naive_loops_on_integers(self, stride, padding, dilation):
        # integer-valued operands make every summation order exact
        rng = np.random.default_rng(stride * 10 + padding * 3 + dilation)
        x = rng.integers(-4, 5, size=(2, 4, 8, 8)).astype(float)
        w = rng.integers(-3, 4, size=(3, 4, 3, 3)).astype(float)
        b = rng.integers(-2, 3, size=3).astype(float)
        got = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding, dilation).data
        np.testing.assert_array_equal(got, naive_conv2d(x, w, b, stride, padding, dilation))

    def test_matches_naive_loops_on_reals(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.uniform(-1, 1, (2, 4, 8, 8)), rng.uniform(-1, 1, (2, 4, 3, 3)), rng.uniform(-1, 1, 2)
        got = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 2, 2).data
        np.testing.assert_allclose(got, naive_conv2d(x, w, b, 1, 2, 2), rtol=0, atol=1e-13)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError, match="channels"):
            ag.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_nonpositive_output(self):
        with pytest.raises(ShapeError, match="nonpositive"):
            ag.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    @pytest.mark.parametrize("wrt", ["x", "w", "b"])
    def test_gradients(self, wrt):
        rng = np.random.default_rng(4)
        vals = {"x": rng.uniform(-1, 1, (2, 3, 6, 6)), "w": rng.uniform(-1, 1, (2, 3, 3, 3)),
                "b": rng.uniform(-1, 1, 2)}

        def f(t):
            args = {k: Tensor(v) for k, v in vals.items()}
            args[wrt] = t
            return ag.sum(ag.square(ag.conv2d(args["x"], args["w"], args["b"], stride=2, padding=2, dilation=2)))

        assert grad_check(f, Tensor(vals[wrt])) < 1e-7


class TestMaxPool:
    def test_single_window(self):
        np.testing.assert_array_equal(ag.max_pool2d(Tensor([[[[1, 2], [3, 4]]]])).data, [[[[4.0]]]])

    def test_constant_map_routes_to_first(self):
        x = Tensor(np.full((1, 1, 4, 4), 2.5), requires_grad=True)
        y = ag.max_pool2d(x)
        np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 2.5))
        ag.backward(ag.sum(y))
        expected = np.zeros((4, 4))
        expected[::2, ::2] = 1
        np.testing.assert_array_equal(x.grad[0, 0], expected)

    def test_random_matches_brute_force(self):
        x = np.random.default_rng(5).normal(size=(2, 3, 4, 4))
        np.testing.assert_array_equal(ag.max_pool2d(Tensor(x)).data, brute_pool(x))

    def test_odd_extent(self):
        with pytest.raises(ShapeError, match="even"):
            ag.max_pool2d(Tensor(np.zeros((1, 1, 3, 4))))

    def test_gradient(self):
        x = np.random.default_rng(6).normal(size=(1, 2, 4, 6))
        assert grad_check(lambda t: ag.sum(ag.square(ag.max_pool2d(t))), Tensor(x)) < 1e-8


class TestReluSoftmax:
    def test_relu_values(self):
        np.testing.assert_array_equal(ag.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_identity_on_positive(self):
        x = np.array([0.5, 1.0, 3.0])
        np.testing.assert_array_equal(ag.relu(Tensor(x)).data, x)

    def test_relu_gradient_away_from_zero(self):
        x = np.array([-0.7, -0.2, 0.3, 1.1])
        assert grad_check(lambda t: ag.sum(ag.square(ag.relu(t))), Tensor(x)) < 1e-8

    def test_softmax_symmetric(self):
        p = ag.channel_softmax(Tensor(np.zeros((1, 2, 1, 1)))).data
        np.testing.assert_array_equal(p.ravel(), [0.5, 0.5])

    @pytest.mark.parametrize("t", [0.1, 1.0, 3.0, 20.0])
    def test_softmax_against_sigmoid(self, t):
        p = ag.channel_softmax(Tensor(np.array([t, -t]).reshape(1, 2, 1, 1))).data.ravel()
        expected = [1.0 / (1.0 + np.exp(-2 * t)), 1.0 / (1.0 + np.exp(2 * t))]
        np.testing.assert_allclose(p, expected, rtol=1e-14)

    def test_softmax_normalised(self):
        logits = np.random.default_rng(7).normal(scale=30, size=(2, 2, 9, 9))
        s = ag.channel_softmax(Tensor(logits)).data.sum(axis=1)
        assert np.max(np.abs(s - 1.0)) <= 1e-12

    def test_softmax_wrong_channels(self):
        with pytest.raises(ShapeError):
            ag.channel_softmax(Tensor(np.zeros((1, 3, 2, 2))))

    def test_softmax_gradient(self):
        x = np.random.default_rng(8).normal(size=(1, 2, 3, 3))
        w = Tensor(np.random.default_rng(9).normal(size=(1, 2, 3, 3)))
        assert grad_check(lambda t: ag.sum(ag.mul(ag.channel_softmax(t), w)), Tensor(x)) < 1e-8


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ag.backward(ag.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_mse_of_identical_is_zero_grad(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        y = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ag.backward(ag.sum(ag.square(ag.sub(x, y))))
        assert not x.grad.any() and not y.grad.any()

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            ag.backward(ag.scale(x, 2))

    def test_unreachable_leaf_untouched(self):
        x = Tensor([1.0], requires_grad=True)
        z = Tensor([5.0], requires_grad=True)
        ag.backward(ag.sum(ag.square(x)))
        assert z.grad is None

    def test_composite_conv_relu_matches_fd(self):
        rng = np.random.default_rng(10)
        w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)))
        b = Tensor(rng.uniform(-1, 1, 3))
        x = rng.uniform(-1, 1, (1, 2, 6, 6))
        assert grad_check(lambda t: ag.sum(ag.relu(ag.conv2d(t, w, b, padding=1))), Tensor(x), eps=1e-5) < 1e-6

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, (1, 2, 8, 8))
        w = rng.uniform(-1, 1, (4, 2, 3, 3))
        grads = []
        for _ in range(2):
            wt = Tensor(w, requires_grad=True)
            y = ag.max_pool2d(ag.relu(ag.conv2d(Tensor(x), wt, padding=1)))
            ag.backward(ag.sum(ag.square(y)))
            grads.append(wt.grad.tobytes())
        assert grads[0] == grads[1]

    def test_tape_records_in_topological_order(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        with Tape() as tape:
            y = ag.sum(ag.relu(ag.scale(x, 2.0)))
        assert tape.op_names() == ["scale", "relu", "sum"]
        seqs = [n.seq for n in tape.nodes]
        assert seqs == sorted(seqs)
        tape.backward(y)
        np.testing.assert_array_equal(x.grad, [2.0, 0.0])

    def test_shared_subgraph_visited_once(self):
        x = Tensor([3.0], requires_grad=True)
        h = ag.square(x)
        ag.backward(ag.sum(ag.add(h, h)))
        np.testing.assert_array_equal(x.grad, [12.0])


class TestGradCheck:
    def test_linear_exact(self):
        c = Tensor(np.random.default_rng(12).normal(size=5))
        assert grad_check(lambda t: ag.sum(ag.mul(t, c)), Tensor(np.ones(5))) < 1e-9

    def test_quadratic(self):
        x = np.random.default_rng(13).uniform(-1, 1, 7)
        assert grad_check(lambda t: ag.sum(ag.square(t)), Tensor(x)) < 1e-7

    def test_detects_wrong_gradient(self):
        def bad(t):
            return ag._make("bad", np.array(float((t.data ** 2).sum())), (t,), lambda g: (g * t.data,))

        assert grad_check(bad, Tensor([1.0, 2.0])) > 0.1

    def test_kink_coordinates_resampled(self):
        x = np.array([1e-7, 0.5, -0.4, 0.9])

        def f(t):
            return ag.sum(ag.relu(t))

        assert grad_check(f, Tensor(x), n_coords=2, rng=np.random.default_rng(0)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([4, 6, 8]), st.integers(0, 2), st.integers(1, 2),
       st.integers(0, 2**16))
def test_conv_shapes_property(c_in, c_out, size, padding, dilation, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-3, 4, size=(1, c_in, size, size)).astype(float)
    w = rng.integers(-2, 3, size=(c_out, c_in, 3, 3)).astype(float)
    b = np.zeros(c_out)
    if size + 2 * padding - dilation * 2 < 1:
        return
    got = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, padding, dilation).data
    np.testing.assert_array_equal(got, naive_conv2d(x, w, b, 1, padding, dilation))
