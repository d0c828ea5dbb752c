import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adknet import tensor as T
from adknet.tensor import ConvSpec, NonFiniteError, ShapeError

from gradcheck import check_op_gradient


def naive_conv(x, w, b):
    """Reflection-padded cross-correlation with six explicit loops."""
    h, wd, ci = x.shape
    co, _, kh, kw = w.shape
    r = kh // 2
    out = np.zeros((h, wd, co))
    for y in range(h):
        for xx in range(wd):
            for o in range(co):
                acc = b[o]
                for i in range(ci):
                    for dy in range(kh):
                        for dx in range(kw):
                            sy, sx = y + dy - r, xx + dx - r
                            sy = -sy if sy < 0 else (2 * (h - 1) - sy if sy >= h else sy)
                            sx = -sx if sx < 0 else (2 * (wd - 1) - sx if sx >= wd else sx)
                            acc += w[o, i, dy, dx] * x[sy, sx, i]
                out[y, xx, o] = acc
    return out


def conv_spec(w, b, mode="reflect"):
    return ConvSpec(T.tensor(w), T.tensor(b), mode)


class TestReflectPad:
    def test_zero_pad_is_identity(self, rng):
        x = T.tensor(rng.random((4, 5, 2)))
        assert np.array_equal(T.reflect_pad(x, 0).data, x.data)

    def test_row_example(self):
        # a single row can't be padded vertically, so pad rows [a, b, c] stacked 3 high
        img = T.tensor(np.tile(np.array([1.0, 2.0, 3.0]), (3, 1))[:, :, None])
        out = T.reflect_pad(img, 1).data[2, :, 0]
        assert out.tolist() == [2.0, 1.0, 2.0, 3.0, 2.0]

    def test_corner_maps_to_inner_diagonal(self):
        src = np.arange(9, dtype=np.float64).reshape(3, 3, 1)
        out = T.reflect_pad(T.tensor(src), 1).data[:, :, 0]
        # hand-enumerated index map: padded -1 -> 1, padded 3 -> 1
        idx = [1, 0, 1, 2, 1]
        expected = src[:, :, 0][np.ix_(idx, idx)]
        assert np.array_equal(out, expected)
        assert out[0, 0] == src[1, 1, 0]

    def test_pad_too_large(self):
        with pytest.raises(ShapeError):
            T.reflect_pad(T.tensor(np.zeros((3, 5, 1))), 3)

    def test_gradient(self):
        assert check_op_gradient(lambda t: T.reflect_pad(t, 2), (4, 5, 2)) < 1e-6


class TestConv:
    def test_identity_kernel(self, rng):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1
        x = rng.random((6, 7, 1)).astype(np.float32)
        assert np.array_equal(T.conv2d(T.tensor(x), conv_spec(w, np.zeros(1))).data, x)

    def test_ones_kernel_on_constant(self):
        x = T.tensor(np.full((5, 6, 1), 0.3))
        out = T.conv2d(x, conv_spec(np.ones((1, 1, 3, 3)), np.zeros(1))).data
        np.testing.assert_allclose(out, 2.7, rtol=1e-6)

    def test_matches_naive_loops(self, rng):
        with T.precision(np.float64):
            x = rng.standard_normal((5, 5, 2))
            w = rng.standard_normal((3, 2, 3, 3))
            b = rng.standard_normal(3)
            out = T.conv2d(T.tensor(x), conv_spec(w, b)).data
        np.testing.assert_allclose(out, naive_conv(x, w, b), atol=1e-6)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(T.tensor(np.zeros((4, 4, 2))), conv_spec(np.zeros((1, 3, 3, 3)), np.zeros(1)))

    def test_no_padding_mode(self, rng):
        out = T.conv2d(T.tensor(rng.random((6, 6, 1))), conv_spec(np.ones((2, 1, 3, 3)), np.zeros(2), "none"))
        assert out.shape == (4, 4, 2)

    def test_batched_matches_single(self, rng):
        x = rng.random((2, 5, 6, 3)).astype(np.float32)
        spec = conv_spec(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))
        batched = T.conv2d(T.tensor(x), spec).data
        for i in range(2):
            np.testing.assert_allclose(batched[i], T.conv2d(T.tensor(x[i]), spec).data, rtol=1e-6)

    def test_gradient(self):
        def op(x, w, b):
            return T.conv2d(x, ConvSpec(w, b))

        assert check_op_gradient(op, (2, 5, 4, 2), (3, 2, 3, 3), (3,)) < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(
        h=st.integers(3, 9),
        w=st.integers(3, 9),
        k=st.sampled_from([1, 3, 5]),
        ci=st.integers(1, 3),
        co=st.integers(1, 3),
    )
    def test_reflection_preserves_extents(self, h, w, k, ci, co):
        if (k - 1) // 2 >= min(h, w):
            return
        x = T.tensor(np.ones((h, w, ci)))
        out = T.conv2d(x, conv_spec(np.ones((co, ci, k, k)), np.zeros(co)))
        assert out.shape == (h, w, co)

    @settings(max_examples=20, deadline=None)
    @given(v=st.floats(-2, 2), seed=st.integers(0, 1000))
    def test_constant_preservation(self, v, seed):
        r = np.random.default_rng(seed)
        x = T.tensor(np.full((6, 5, 2), v), dtype=np.float64)
        spec = ConvSpec(T.tensor(r.standard_normal((3, 2, 3, 3)), dtype=np.float64), T.tensor(r.standard_normal(3), dtype=np.float64))
        out = T.conv2d(x, spec).data
        np.testing.assert_allclose(out, np.broadcast_to(out[:1, :1], out.shape), atol=1e-12)


class TestRelu:
    def test_values(self):
        assert T.relu(T.tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_negative_gives_zero_and_zero_grad(self):
        p = T.parameter([-3.0, -0.5])
        T.backward(T.sum_over(T.relu(p)))
        assert p.grad.tolist() == [0, 0]

    def test_gradient_at_zero_and_positive(self):
        p = T.parameter([0.0, 3.0])
        T.backward(T.sum_over(T.relu(p)))
        assert p.grad.tolist() == [0, 1]


class TestPixelShuffle:
    def test_unshuffle_channel_order(self):
        x = np.arange(16, dtype=np.float32).reshape(4, 4, 1)
        out = T.pixel_unshuffle(T.tensor(x), 2).data
        assert out.shape == (2, 2, 4)
        # channel i*s + j holds offset (i, j) of the top-left 2x2 block
        assert out[0, 0].tolist() == [0, 1, 4, 5]

    def test_scale_one_identity(self, rng):
        x = rng.random((3, 4, 2)).astype(np.float32)
        assert np.array_equal(T.pixel_unshuffle(T.tensor(x), 1).data, x)

    def test_round_trip_bit_exact(self, rng):
        x = rng.random((6, 6, 3)).astype(np.float32)
        back = T.pixel_shuffle(T.pixel_unshuffle(T.tensor(x), 3), 3).data
        assert np.array_equal(back, x)

    def test_non_divisible(self):
        with pytest.raises(ShapeError):
            T.pixel_unshuffle(T.tensor(np.zeros((5, 4, 1))), 2)

    def test_gradients(self):
        assert check_op_gradient(lambda t: T.pixel_unshuffle(t, 2), (4, 6, 2)) < 1e-6
        assert check_op_gradient(lambda t: T.pixel_shuffle(t, 2), (2, 3, 8)) < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(s=st.integers(1, 4), h=st.integers(1, 3), w=st.integers(1, 3), c=st.integers(1, 3), seed=st.integers(0, 99))
    def test_round_trip_property(self, s, h, w, c, seed):
        x = np.random.default_rng(seed).random((h * s, w * s, c)).astype(np.float32)
        assert np.array_equal(T.pixel_shuffle(T.pixel_unshuffle(T.tensor(x), s), s).data, x)


class TestReductions:
    def test_sum(self):
        assert T.sum_over(T.tensor([1.0, 2.0, 3.0])).item() == 6

    def test_max_tie_routes_to_first(self):
        p = T.parameter([2.0, 2.0])
        T.backward(T.max_over(p))
        assert p.grad.tolist() == [1, 0]

    def test_min_tie_routes_to_first_along_axis(self):
        p = T.parameter([[1.0, 0.0, 0.0], [3.0, 3.0, 5.0]])
        T.backward(T.sum_over(T.min_over(p, axis=1)))
        assert p.grad.tolist() == [[0, 1, 0], [1, 0, 0]]

    def test_abs_gradient_at_zero(self):
        p = T.parameter([0.0, -2.0, 2.0])
        T.backward(T.sum_over(T.abs(p)))
        assert p.grad.tolist() == [0, -1, 1]

    def test_mean(self):
        p = T.parameter(np.ones((2, 3)))
        T.backward(T.mean(p))
        np.testing.assert_allclose(p.grad, 1 / 6)

    @pytest.mark.parametrize(
        "op,shapes,positive",
        [
            (lambda a, b: a + b, [(3, 4), (4,)], False),
            (lambda a, b: a - b, [(3, 1), (3, 4)], False),
            (lambda a, b: a * b, [(2, 3), (2, 3)], False),
            (lambda a, b: a / b, [(2, 3), (3,)], True),
            (lambda a: T.sum_over(a, axis=1, keepdims=True), [(3, 5)], False),
            (lambda a: T.max_over(a, axis=-1, keepdims=True), [(3, 5)], False),
            (lambda a: T.min_over(a, axis=0), [(4, 2)], False),
            (lambda a: T.abs(a), [(3, 3)], False),
            (lambda a: T.relu(a), [(3, 3)], False),
            (lambda a: T.mean(a), [(3, 3)], False),
            (lambda a: T.stack([a, a * 2], axis=1), [(2, 3)], False),
            (lambda a: a.reshape(6, 1)[2:5], [(2, 3)], False),
            (lambda a: T.where(np.array([True, False, True]), a, 0.5), [(2, 3)], False),
        ],
    )
    def test_gradients(self, op, shapes, positive):
        assert check_op_gradient(op, *shapes, positive=positive) < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        p = T.parameter(np.arange(4.0))
        T.backward(T.sum_over(p))
        assert p.grad.tolist() == [1, 1, 1, 1]

    def test_sum_of_squares(self):
        p = T.parameter([1.0, 2.0])
        grads = T.backward(T.sum_over(p * p))
        assert p.grad.tolist() == [2, 4]
        assert grads[p] is p.grad

    def test_non_scalar_loss(self):
        p = T.parameter([1.0, 2.0])
        with pytest.raises(ValueError):
            T.backward(p * 2)

    def test_disconnected_loss(self):
        with pytest.raises(ValueError):
            T.backward(T.sum_over(T.tensor([1.0])))

    def test_tape_released(self):
        p = T.parameter([1.0, 2.0])
        y = p * 3
        loss = T.sum_over(y)
        T.backward(loss)
        assert loss.is_leaf and y.is_leaf

    def test_fan_out_accumulates(self):
        p = T.parameter([1.5])
        T.backward(T.sum_over(p * p + p))
        assert p.grad.tolist() == [4.0]

    def test_no_grad_records_nothing(self):
        p = T.parameter([1.0])
        with T.no_grad():
            y = p * 2
        assert not y.requires_grad

    def test_nonfinite_raises(self):
        with pytest.raises(NonFiniteError):
            T.tensor([1.0]) / T.tensor([0.0])

    def test_default_precision(self):
        assert T.tensor([1.0]).dtype == np.float32
        with T.precision(np.float64):
            assert T.tensor([1.0]).dtype == np.float64
