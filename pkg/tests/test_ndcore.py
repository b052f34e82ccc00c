"""Tensor substrate: primitive op values, backward engine, gradient checks."""

import numpy as np
import pytest

from raindiff import ndcore as nd
from raindiff.ndcore import ShapeError, Tensor, backward, finite_diff_check, no_grad
from raindiff.ndcore import kernels


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestPrimitiveValues:
    def test_conv_identity_1x1_kernel(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 3, 5, 5), dtype=np.float32))
        w = Tensor(np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1))
        b = Tensor(np.zeros(3, dtype=np.float32))
        out = nd.conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_conv_all_ones_center_is_window_sum(self):
        # 3x3 input of ones, single all-ones 3x3 kernel, pad 1: the center
        # output sums the full window -> 9.
        x = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        out = nd.conv2d(x, w, pad=1)
        assert out.shape == (1, 1, 3, 3)
        assert out.data[0, 0, 1, 1] == pytest.approx(9.0)
        assert out.data[0, 0, 0, 0] == pytest.approx(4.0)

    def test_conv_stride2_shape(self):
        x = Tensor(np.zeros((1, 2, 8, 8), dtype=np.float32))
        w = Tensor(np.zeros((4, 2, 3, 3), dtype=np.float32))
        assert nd.conv2d(x, w, stride=2, pad=1).shape == (1, 4, 4, 4)

    def test_silu_at_zero(self):
        assert nd.silu(Tensor(np.zeros(3, np.float32))).data.tolist() == [0.0, 0.0, 0.0]

    def test_tanh_range(self):
        x = Tensor(np.linspace(-50, 50, 101, dtype=np.float32))
        y = nd.tanh(x).data
        assert np.all(np.abs(y) <= 1.0)

    def test_upsample_nearest_values(self):
        x = Tensor(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
        y = nd.upsample_nearest2x(x).data
        np.testing.assert_array_equal(
            y[0, 0], [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]
        )

    def test_concat_channels_rank3_and_rank4(self):
        a = Tensor(np.ones((3, 2, 2), np.float32))
        b = Tensor(np.zeros((1, 2, 2), np.float32))
        assert nd.concat_channels([a, b]).shape == (4, 2, 2)
        a4 = Tensor(np.ones((2, 3, 2, 2), np.float32))
        b4 = Tensor(np.zeros((2, 1, 2, 2), np.float32))
        assert nd.concat_channels([a4, b4]).shape == (2, 4, 2, 2)

    def test_mse_mae_values(self):
        a = Tensor(np.full((2, 2), 1.5, np.float32))
        b = Tensor(np.full((2, 2), 1.0, np.float32))
        assert nd.mean_squared_error(a, b).item() == pytest.approx(0.25)
        assert nd.mean_absolute_error(a, b).item() == pytest.approx(0.5)

    def test_shape_mismatch_names_shapes(self):
        a = Tensor(np.zeros((2, 3), np.float32))
        b = Tensor(np.zeros((3, 2), np.float32))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            nd.add(a, b)

    def test_conv_shape_errors(self):
        x = Tensor(np.zeros((1, 3, 4, 4), np.float32))
        w = Tensor(np.zeros((2, 4, 3, 3), np.float32))
        with pytest.raises(ShapeError, match="3 channels but w expects 4"):
            nd.conv2d(x, w)
        with pytest.raises(ShapeError, match="stride"):
            nd.conv2d(x, Tensor(np.zeros((2, 3, 3, 3), np.float32)), stride=3)

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 8, 6, 6), dtype=np.float32) * 50)
        g = Tensor(np.ones(8, np.float32))
        b = Tensor(np.zeros(8, np.float32))
        for out in (
            nd.silu(x),
            nd.tanh(x),
            nd.group_norm(x, g, b, groups=4),
            nd.upsample_nearest2x(x),
        ):
            assert np.all(np.isfinite(out.data))


class TestBackwardEngine:
    def test_hand_chain_rule(self):
        # loss = mean((w*x)^2) with scalars w=2, x=1 -> dL/dw = 2*w*x^2 = 4
        w = t64([2.0], grad=True)
        x = t64([1.0])
        loss = nd.mean_squared_error(nd.mul(w, x), t64([0.0]))
        backward(loss)
        assert w.grad[0] == pytest.approx(4.0)

    def test_independent_tensor_gets_no_grad(self):
        w = t64([3.0], grad=True)
        x = t64([1.0, 2.0], grad=True)
        loss = nd.mean_all(x)
        backward(loss)
        assert w.grad is None
        np.testing.assert_allclose(x.grad, [0.5, 0.5])

    def test_sum_grad_is_ones(self):
        x = t64(np.arange(4.0).reshape(2, 2), grad=True)
        backward(nd.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_backward_rejects_non_scalar(self):
        x = t64(np.ones((2, 2)), grad=True)
        y = nd.mul(x, x)
        with pytest.raises(ShapeError, match="scalar"):
            backward(y)

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        a, b = 2.5, -1.25

        def l1(v):
            return nd.mean_squared_error(v, Tensor(np.zeros((4, 4))))

        def l2(v):
            return nd.mean_all(nd.silu(v))

        x.zero_grad()
        backward(nd.add(nd.affine(l1(x), a), nd.affine(l2(x), b)))
        combined = x.grad.copy()

        x.zero_grad()
        backward(l1(x))
        g1 = x.grad.copy()
        x.zero_grad()
        backward(l2(x))
        g2 = x.grad.copy()
        np.testing.assert_allclose(combined, a * g1 + b * g2, atol=1e-6)

    def test_grad_accumulates_through_fanout(self):
        x = t64([1.0, 2.0], grad=True)
        y = nd.add(x, x)
        backward(nd.sum_all(y))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_no_grad_blocks_recording(self):
        x = t64([1.0], grad=True)
        with no_grad():
            y = nd.mul(x, x)
        assert not y.requires_grad
        assert y._parents == ()

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.standard_normal((2, 4, 8, 8), dtype=np.float32), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 4, 3, 3), dtype=np.float32), requires_grad=True)
            out = nd.conv2d(x, w, pad=1)
            backward(nd.mean_squared_error(out, Tensor(np.zeros_like(out.data))))
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        o1, gx1, gw1 = run()
        o2, gx2, gw2 = run()
        assert np.array_equal(o1, o2) and np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def _loss_of(fn):
    """Reduce an op's output to a scalar probe for finite differences."""

    def wrapped(*tensors):
        out = fn(*tensors)
        return out if out.size == 1 else nd.mean_squared_error(
            out, Tensor(np.zeros_like(out.data))
        )

    return wrapped


class TestFiniteDifference:
    def test_linear_op_is_nearly_exact(self):
        # y = a*x at a=3: derivative exactly 3, fd error ~ machine level
        x = t64([1.7], grad=True)
        err = finite_diff_check(_loss_of(lambda v: nd.affine(v, 3.0)), [x], h=1e-5)
        assert err < 1e-9

    def test_conv_random_8x8(self):
        rng = np.random.default_rng(5)
        x = t64(rng.standard_normal((1, 2, 8, 8)), grad=True)
        w = t64(rng.standard_normal((3, 2, 3, 3)), grad=True)
        b = t64(rng.standard_normal(3), grad=True)
        err = finite_diff_check(
            _loss_of(lambda xx, ww, bb: nd.conv2d(xx, ww, bb, pad=1)), [x, w, b], h=1e-5
        )
        assert err < 1e-5

    def test_constant_op_error_zero(self):
        x = t64([2.0], grad=True)

        def const_loss(v):
            return nd.mean_squared_error(nd.affine(v, 0.0, 1.0), t64([1.0]))

        assert finite_diff_check(const_loss, [x], h=1e-4) == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_every_primitive_under_1e5_at_random_points(self, seed):
        rng = np.random.default_rng(100 + seed)

        def rt(shape):
            return t64(rng.standard_normal(shape), grad=True)

        cases = []
        a, b = rt((3, 4)), rt((3, 4))
        cases.append((lambda u, v: nd.add(u, v), [a, b]))
        cases.append((lambda u, v: nd.sub(u, v), [rt((3, 4)), rt((3, 4))]))
        cases.append((lambda u, v: nd.mul(u, v), [rt((3, 4)), rt((3, 4))]))
        cases.append((lambda u: nd.affine(u, -1.3, 0.4), [rt((5,))]))
        cases.append((lambda u: nd.silu(u), [rt((6,))]))
        cases.append((lambda u: nd.tanh(u), [rt((6,))]))
        cases.append((lambda u: nd.mean_all(u), [rt((4, 3))]))
        cases.append((lambda u: nd.sum_all(u), [rt((4, 3))]))
        cases.append((lambda u, v: nd.mean_squared_error(u, v), [rt((3, 3)), rt((3, 3))]))
        # keep |a-b| off zero so the mae subgradient is clean
        m1 = rt((3, 3))
        m2 = t64(m1.data + np.where(rng.standard_normal((3, 3)) > 0, 1.0, -1.0), grad=True)
        cases.append((lambda u, v: nd.mean_absolute_error(u, v), [m1, m2]))
        cases.append((lambda u, v: nd.concat_channels([u, v]), [rt((2, 2, 3)), rt((1, 2, 3))]))
        cases.append(
            (lambda u, v: nd.concat_batch([u, v]), [rt((1, 2, 2, 2)), rt((2, 2, 2, 2))])
        )
        cases.append((lambda u: nd.slice_batch(u, 1, 3), [rt((4, 2, 2, 2))]))
        cases.append((lambda u: nd.crop2d(u, 1, 2, 3, 3), [rt((2, 2, 6, 6))]))
        cases.append((lambda u: nd.broadcast_spatial(u, (3, 4)), [rt((2, 5))]))
        cases.append((lambda u: nd.upsample_nearest2x(u), [rt((1, 2, 3, 3))]))
        cases.append((lambda u, v: nd.matmul(u, v), [rt((3, 4)), rt((4, 2))]))
        cases.append((lambda u, v: nd.bias_add_rows(u, v), [rt((3, 4)), rt((4,))]))
        cases.append(
            (lambda xx, ww, bb: nd.conv2d(xx, ww, bb, stride=2, pad=1),
             [rt((2, 2, 6, 6)), rt((3, 2, 3, 3)), rt((3,))])
        )
        cases.append(
            (lambda xx, gg, bb: nd.group_norm(xx, gg, bb, groups=2),
             [rt((2, 4, 3, 3)), rt((4,)), rt((4,))])
        )

        for fn, tensors in cases:
            err = finite_diff_check(_loss_of(fn), tensors, h=1e-5)
            assert err <= 1e-5, f"{fn} fd error {err:.3e}"


class TestKernelBackends:
    @pytest.fixture(autouse=True)
    def restore_backend(self):
        prev = kernels.backend()
        yield
        kernels.set_backend(prev)

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)])
    def test_backends_agree_bitwise(self, stride, pad, k):
        if kernels.backend() != "numba":
            pytest.skip("numba backend unavailable")
        rng = np.random.default_rng(9)
        xp = rng.standard_normal((2, 3, 9 + 2 * pad, 9 + 2 * pad)).astype(np.float32)
        kernels.set_backend("numba")
        cols_nb = kernels.im2col(xp, k, k, stride)
        kernels.set_backend("numpy")
        cols_np = kernels.im2col(xp, k, k, stride)
        assert np.array_equal(cols_nb, cols_np)

        g = rng.standard_normal(cols_nb.shape).astype(np.float32)
        kernels.set_backend("numba")
        back_nb = kernels.col2im(g, xp.shape, k, k, stride)
        kernels.set_backend("numpy")
        back_np = kernels.col2im(g, xp.shape, k, k, stride)
        np.testing.assert_allclose(back_nb, back_np, atol=1e-6)

    def test_set_backend_rejects_unknown(self):
        with pytest.raises(ValueError):
            kernels.set_backend("cuda")
