import math

import numpy as np
import pytest

from nvsr import autodiff as ad
from nvsr.autodiff import ShapeMismatch, Tape, Tensor


def fd_check(build_loss, params, h=1e-6):
    return ad.check_gradients(build_loss, params, h=h)


class TestMatmul:
    def test_identity_left(self):
        b = np.arange(6, dtype=np.float32).reshape(3, 2)
        out = ad.matmul(Tensor(np.eye(3, dtype=np.float32)), Tensor(b))
        np.testing.assert_array_equal(out.data, b)

    def test_identity_right(self):
        a = np.array([[1, 2], [3, 4]], dtype=np.float32)
        out = ad.matmul(Tensor(a), Tensor(np.eye(2, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, a)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeMismatch, match=r"\(4, 5\).*\(3, 2\)"):
            ad.matmul(Tensor(np.zeros((4, 5), np.float32)), Tensor(np.zeros((3, 2), np.float32)))

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(3)
        params = {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=(5, 3))}

        def loss(tape, t):
            prod = ad.matmul(t["a"], t["b"])
            return ad.tsum(ad.mul(prod, prod))

        assert fd_check(loss, params) < 1e-6


class TestElementwise:
    def test_relu_values(self):
        out = ad.relu(Tensor(np.array([-1.5, 2.0], np.float64)))
        np.testing.assert_array_equal(out.data, [0.0, 2.0])

    def test_softplus_zero(self):
        out = ad.softplus(Tensor(np.array([0.0])))
        assert out.data[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_sigmoid_zero(self):
        out = ad.sigmoid(Tensor(np.array([0.0])))
        assert out.data[0] == pytest.approx(0.5, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(Tensor(np.zeros(3, np.float32)), Tensor(np.zeros(4, np.float32)))

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "relu", "softplus", "sigmoid", "exp", "absval"])
    def test_gradients(self, op):
        rng = np.random.default_rng(hash(op) % 2**32)
        binary = op in ("add", "sub", "mul")
        params = {"x": rng.normal(size=(3, 4)) + 0.1}
        if binary:
            params["y"] = rng.normal(size=(3, 4))

        def loss(tape, t):
            fn = getattr(ad, op)
            out = fn(t["x"], t["y"]) if binary else fn(t["x"])
            return ad.tsum(ad.mul(out, out))

        assert fd_check(loss, params) < 1e-6

    def test_scalar_operand(self):
        rng = np.random.default_rng(9)
        params = {"x": rng.normal(size=(2, 3)), "s": np.array([0.7])}

        def loss(tape, t):
            return ad.tsum(ad.mul(t["x"], ad.reshape(t["s"], ())))

        assert fd_check(loss, params) < 1e-7


class TestConcat:
    def test_three_vectors(self):
        c = 5
        parts = [Tensor(np.full(c, i, np.float32)) for i in range(3)]
        out = ad.concat(parts, axis=0)
        assert out.shape == (3 * c,)
        np.testing.assert_array_equal(out.data[:c], 0)
        np.testing.assert_array_equal(out.data[2 * c:], 2)

    def test_single_identity(self):
        x = np.arange(4, dtype=np.float32)
        out = ad.concat([Tensor(x)])
        np.testing.assert_array_equal(out.data, x)

    def test_gradient_slices(self):
        tape = Tape()
        a = tape.leaf(np.zeros(2))
        b = tape.leaf(np.zeros(3))
        out = ad.concat([a, b], axis=0)
        loss = ad.tsum(ad.mul(out, Tensor(np.arange(5, dtype=np.float64))))
        tape.backward(loss)
        np.testing.assert_array_equal(tape.grad(a), [0, 1])
        np.testing.assert_array_equal(tape.grad(b), [2, 3, 4])

    def test_gradient_fd(self):
        rng = np.random.default_rng(5)
        params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 2))}

        def loss(tape, t):
            out = ad.concat([t["a"], t["b"]], axis=1)
            return ad.tsum(ad.mul(out, out))

        assert fd_check(loss, params) < 1e-7

    def test_dim_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.concat([Tensor(np.zeros((2, 3), np.float32)), Tensor(np.zeros((3, 3), np.float32))], axis=1)


def brute_force_conv2d(x, w, b):
    """Direct nested-loop same-padding cross-correlation."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((cout, h, wd), dtype=np.float64)
    for co in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = b[co]
                for ci in range(cin):
                    for di in range(kh):
                        for dj in range(kw):
                            ii, jj = i + di - ph, j + dj - pw
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += x[ci, ii, jj] * w[co, ci, di, dj]
                out[co, i, j] = acc
    return out


class TestConv2d:
    def test_one_by_one_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 4, 4)).astype(np.float32)
        w = np.ones((1, 1, 1, 1), np.float32)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1, np.float32)))
        np.testing.assert_allclose(out.data, x, rtol=1e-6)

    def test_impulse_stamps_kernel(self):
        x = np.zeros((1, 5, 5), np.float64)
        x[0, 2, 2] = 1.0
        w = np.random.default_rng(1).normal(size=(1, 1, 3, 3))
        b = np.zeros(1)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, brute_force_conv2d(x, w, b), atol=1e-12)
        # cross-correlation leaves the kernel flipped relative to the stamp
        np.testing.assert_allclose(out.data[0, 1:4, 1:4], w[0, 0, ::-1, ::-1], atol=1e-12)

    def test_matches_bruteforce_random(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, brute_force_conv2d(x, w, b), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.conv2d(Tensor(np.zeros((2, 4, 4), np.float32)),
                      Tensor(np.zeros((3, 5, 3, 3), np.float32)),
                      Tensor(np.zeros(3, np.float32)))

    def test_gradients_vs_finite_differences(self):
        rng = np.random.default_rng(7)
        params = {
            "x": rng.normal(size=(2, 5, 5)),
            "w": rng.normal(size=(3, 2, 3, 3)),
            "b": rng.normal(size=3),
        }
        probe = rng.normal(size=(3, 5, 5))

        def loss(tape, t):
            out = ad.conv2d(t["x"], t["w"], t["b"])
            return ad.tsum(ad.mul(out, Tensor(probe)))

        assert fd_check(loss, params) < 1e-5


class TestBilinearSample:
    def test_grid_node_identity(self):
        rng = np.random.default_rng(4)
        plane = rng.normal(size=(5, 5, 3)).astype(np.float32)
        out = ad.bilinear_sample2d(Tensor(plane), 2.0, 3.0)
        np.testing.assert_allclose(out.data, plane[2, 3], rtol=1e-6)

    def test_cell_center_averages_four_nodes(self):
        plane = np.zeros((2, 2, 1), np.float64)
        plane[:, :, 0] = [[1, 2], [3, 4]]
        out = ad.bilinear_sample2d(Tensor(plane), 0.5, 0.5)
        assert out.data[0] == pytest.approx(2.5, abs=1e-12)

    def test_matches_weight_formula_oracle(self):
        rng = np.random.default_rng(11)
        plane = rng.normal(size=(7, 7, 4))
        for _ in range(20):
            u = rng.uniform(0, 6)
            v = rng.uniform(0, 6)
            i, j = int(u), int(v)
            i, j = min(i, 5), min(j, 5)
            fu, fv = u - i, v - j
            expect = ((1 - fu) * (1 - fv) * plane[i, j] + (1 - fu) * fv * plane[i, j + 1]
                      + fu * (1 - fv) * plane[i + 1, j] + fu * fv * plane[i + 1, j + 1])
            out = ad.bilinear_sample2d(Tensor(plane), u, v)
            np.testing.assert_allclose(out.data, expect, atol=1e-12)

    def test_out_of_range_clamps(self):
        plane = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
        out = ad.bilinear_sample2d(Tensor(plane), -3.0, 9.0)
        np.testing.assert_allclose(out.data, plane[0, 1])

    def test_nonfinite_coordinates_rejected(self):
        plane = Tensor(np.zeros((3, 3, 1), np.float32))
        with pytest.raises(ValueError):
            ad.bilinear_sample2d(plane, np.nan, 0.0)

    def test_gradient_touches_only_four_cells(self):
        tape = Tape()
        plane = tape.leaf(np.random.default_rng(0).normal(size=(6, 6, 2)))
        out = ad.bilinear_gather(plane, np.array([2.3]), np.array([4.6]))
        tape.backward(ad.tsum(out))
        g = tape.grad(plane)
        touched = np.argwhere(np.abs(g).sum(axis=2) > 0)
        assert set(map(tuple, touched)) == {(2, 4), (2, 5), (3, 4), (3, 5)}

    def test_gradient_fd(self):
        rng = np.random.default_rng(13)
        params = {"plane": rng.normal(size=(5, 5, 3))}
        us = rng.uniform(0, 4, size=8)
        vs = rng.uniform(0, 4, size=8)
        probe = rng.normal(size=(8, 3))

        def loss(tape, t):
            out = ad.bilinear_gather(t["plane"], us, vs)
            return ad.tsum(ad.mul(out, Tensor(probe)))

        assert fd_check(loss, params) < 1e-7


class TestPixelShuffle:
    def test_alpha_one_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 2, 2)).astype(np.float32)
        out = ad.pixel_shuffle_upsample(Tensor(x), 1)
        np.testing.assert_array_equal(out.data, x)

    def test_two_by_two_layout(self):
        x = np.array([1.0, 2.0, 3.0, 4.0], np.float32).reshape(4, 1, 1)
        out = ad.pixel_shuffle_upsample(Tensor(x), 2)
        np.testing.assert_array_equal(out.data[0], [[1, 2], [3, 4]])

    def test_roundtrip(self):
        x = np.random.default_rng(1).normal(size=(8, 3, 5)).astype(np.float32)
        up = ad.pixel_shuffle_upsample(Tensor(x), 2)
        back = ad.pixel_unshuffle(up, 2)
        np.testing.assert_array_equal(back.data, x)

    def test_indivisible_channels(self):
        with pytest.raises(ShapeMismatch):
            ad.pixel_shuffle_upsample(Tensor(np.zeros((3, 2, 2), np.float32)), 2)

    def test_gradient_fd(self):
        rng = np.random.default_rng(21)
        params = {"x": rng.normal(size=(4, 3, 3))}
        probe = rng.normal(size=(1, 6, 6))

        def loss(tape, t):
            out = ad.pixel_shuffle_upsample(t["x"], 2)
            return ad.tsum(ad.mul(out, Tensor(probe)))

        assert fd_check(loss, params) < 1e-7


class TestBackward:
    def test_identity_loss(self):
        tape = Tape()
        x = tape.leaf(np.array([3.0]))
        tape.backward(ad.tsum(x))
        np.testing.assert_array_equal(tape.grad(x), [1.0])

    def test_sum_of_squares(self):
        tape = Tape()
        x = tape.leaf(np.array([1.0, -2.0, 0.5]))
        tape.backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_allclose(tape.grad(x), 2 * x.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf(np.zeros(3))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(ad.mul(x, x))

    def test_unreached_leaf_gets_zero(self):
        tape = Tape()
        x = tape.leaf(np.ones(2))
        y = tape.leaf(np.ones(2))
        tape.backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_array_equal(tape.grad(y), np.zeros(2))

    def test_backward_linearity(self):
        rng = np.random.default_rng(31)
        x0 = rng.normal(size=(3, 3))

        def grad_of(fn):
            tape = Tape()
            x = tape.leaf(x0.copy())
            tape.backward(fn(x))
            return tape.grad(x)

        l1 = lambda x: ad.tsum(ad.mul(x, x))
        l2 = lambda x: ad.tsum(ad.sigmoid(x))
        combined = grad_of(lambda x: ad.add(l1(x), l2(x)))
        np.testing.assert_allclose(combined, grad_of(l1) + grad_of(l2), rtol=1e-12)

    def test_fanout_accumulates(self):
        tape = Tape()
        x = tape.leaf(np.array([2.0]))
        y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x
        tape.backward(ad.tsum(y))
        np.testing.assert_allclose(tape.grad(x), [2 * 2.0 + 3.0])

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(77)
            tape = Tape()
            a = tape.leaf(rng.normal(size=(4, 4)).astype(np.float32))
            b = tape.leaf(rng.normal(size=(4, 4)).astype(np.float32))
            out = ad.sigmoid(ad.matmul(a, ad.relu(b)))
            loss = ad.tsum(ad.mul(out, out))
            tape.backward(loss)
            return loss.item(), tape.grad(a).copy(), tape.grad(b).copy()

        l1, ga1, gb1 = run()
        l2, ga2, gb2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(ga1, ga2)
        np.testing.assert_array_equal(gb1, gb2)


class TestReductionsAndViews:
    def test_mean_axes(self):
        rng = np.random.default_rng(41)
        params = {"x": rng.normal(size=(3, 4, 2))}

        def loss(tape, t):
            m = ad.mean_axes(t["x"], (0, 1))
            return ad.tsum(ad.mul(m, m))

        assert fd_check(loss, params) < 1e-7

    def test_transpose_reshape_fd(self):
        rng = np.random.default_rng(43)
        params = {"x": rng.normal(size=(2, 3, 4))}
        probe = rng.normal(size=(4, 6))

        def loss(tape, t):
            y = ad.transpose(t["x"], (2, 0, 1))
            y = ad.reshape(y, (4, 6))
            return ad.tsum(ad.mul(y, Tensor(probe)))

        assert fd_check(loss, params) < 1e-7
