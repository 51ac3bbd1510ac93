import numpy as np
import pytest

from stemc.fixedpoint import from_real
from stemc.quantizer import QuantizedLayer, QuantizedNetwork
from stemc.refengine import (
    _conv2d,
    _pool_sum,
    argmax_decode,
    float_forward,
    int_forward,
    yolo_decode,
)


def _fc_layer(name, src, w, m_hat=1.0, m0=1.0, m1=None, bias=None,
              scheme=None, width=16):
    w = np.asarray(w, dtype=np.int8)
    if m1 is None:
        m1 = m_hat / m0
    return QuantizedLayer(
        name=name, kind="fully-connected",
        attrs={"in_features": w.shape[1], "out_features": w.shape[0]},
        inputs=[src], weights=w,
        bias=None if bias is None else np.asarray(bias, dtype=np.int32),
        bias_scheme=scheme, bias_width=width,
        scale_in=1.0, scale_w=1.0, scale_out=1.0,
        m_hat=from_real(m_hat), m0=from_real(m0), m1=from_real(m1),
        i_max=1, out_shape=(w.shape[0],),
    )


def _qnet(layers, input_shape, k=8, acc_bits=16):
    return QuantizedNetwork(
        name="hand", input_shape=input_shape, k=k, acc_bits=acc_bits,
        bias_check_width=16, input_scale=1.0, layers=layers,
    )


class TestWorkedExamples:
    def test_product_bias_at_output(self):
        # sum(W~ X~) = 2*5 - 3*7 = -11; +4 pre-rescale; M_hat = 1 -> -7
        net = _qnet([_fc_layer("fc", "input", [[2, -3]], bias=[4],
                               scheme="product")], (2,))
        for mode in ("direct", "wide", "hw"):
            out, _ = int_forward(net, np.array([[5, 7]]), mode=mode)
            assert out.tolist() == [[-7]], mode

    def test_hidden_layer_clamps_at_zero(self):
        net = _qnet([
            _fc_layer("fc1", "input", [[2, -3]], bias=[4], scheme="product"),
            _fc_layer("fc2", "fc1", [[1]]),
        ], (2,))
        out, record = int_forward(net, np.array([[5, 7]]), mode="hw")
        assert record.layers["fc1"].post.tolist() == [[0]]
        assert out.tolist() == [[0]]

    def test_output_bias_after_rescale(self):
        # round(0.5 * 10) = 5, then +1 in the output domain
        net = _qnet([_fc_layer("fc", "input", [[1]], m_hat=0.5, m0=0.5, m1=1.0,
                               bias=[1], scheme="output", width=8)], (1,))
        for mode in ("direct", "wide", "hw"):
            out, _ = int_forward(net, np.array([[10]]), mode=mode)
            assert out.tolist() == [[6]], mode

    def test_negative_input_signed_wire(self):
        # -11 rides the wire as two's complement; W~ = [1] passes it through
        net = _qnet([_fc_layer("fc", "input", [[1]])], (1,))
        out, _ = int_forward(net, np.array([[-11]]), mode="hw")
        assert out.tolist() == [[-11]]

    def test_output_clamp_range(self):
        net = _qnet([_fc_layer("fc", "input", [[2]])], (1,))
        out, _ = int_forward(net, np.array([[100]]), mode="direct")
        assert out.tolist() == [[127]]
        out, _ = int_forward(net, np.array([[-100]]), mode="direct")
        assert out.tolist() == [[-127]]


class TestModeAgreement:
    @pytest.mark.parametrize("which", ["mlp", "cnn", "residual", "bias"])
    def test_wide_equals_hw_without_saturation(self, which, request):
        bundle = request.getfixturevalue(f"{which}_bundle")
        x = bundle.x_int[:32]
        wide, _ = int_forward(bundle.qnet, x, mode="wide")
        hw, rec = int_forward(bundle.qnet, x, mode="hw")
        assert sum(a.saturations for a in rec.layers.values()) == 0
        assert np.array_equal(wide, hw)

    def test_direct_close_to_hw(self, mlp_bundle):
        x = mlp_bundle.x_int[:64]
        direct, _ = int_forward(mlp_bundle.qnet, x, mode="direct")
        hw, _ = int_forward(mlp_bundle.qnet, x, mode="hw")
        # the K per-step roundings drift at most a few integer steps
        assert int(np.abs(direct - hw).max()) <= 3

    def test_bad_mode_rejected(self, mlp_bundle):
        with pytest.raises(ValueError, match="mode"):
            int_forward(mlp_bundle.qnet, mlp_bundle.x_int[:1], mode="fast")

    def test_unbatched_sample(self, mlp_bundle):
        batched, _ = int_forward(mlp_bundle.qnet, mlp_bundle.x_int[:1])
        single, _ = int_forward(mlp_bundle.qnet, mlp_bundle.x_int[0])
        assert single.ndim == 1
        assert np.array_equal(single, batched[0])

    def test_wrong_input_shape_rejected(self, mlp_bundle):
        with pytest.raises(ValueError, match="input"):
            int_forward(mlp_bundle.qnet, np.zeros((3, 7)))


class TestLinearPieces:
    @pytest.mark.parametrize("stride,pad,kh,kw", [
        (1, 1, 3, 3), (2, 0, 3, 3), (2, 1, 3, 3), (1, 0, 3, 2),
    ])
    def test_conv_matches_brute_force(self, rng, stride, pad, kh, kw):
        x = rng.integers(-9, 10, size=(2, 2, 5, 5)).astype(np.int64)
        w = rng.integers(-9, 10, size=(3, 2, kh, kw)).astype(np.int64)
        attrs = {"kernel": [kh, kw], "stride": stride, "padding": pad}
        got = _conv2d(x, w, attrs)
        oh = (5 + 2 * pad - kh) // stride + 1
        ow = (5 + 2 * pad - kw) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        want = np.zeros((2, 3, oh, ow), dtype=np.int64)
        for s in range(2):
            for o in range(3):
                for y in range(oh):
                    for c in range(ow):
                        acc = 0
                        for i in range(2):
                            for dy in range(kh):
                                for dx in range(kw):
                                    acc += w[o, i, dy, dx] * xp[
                                        s, i, y * stride + dy, c * stride + dx]
                        want[s, o, y, c] = acc
        assert np.array_equal(got, want)

    def test_pool_sum_matches_brute_force(self, rng):
        x = rng.integers(0, 50, size=(2, 3, 6, 6)).astype(np.int64)
        got = _pool_sum(x, {"kernel": [2, 2], "stride": 2})
        want = x.reshape(2, 3, 3, 2, 3, 2).sum(axis=(3, 5))
        assert np.array_equal(got, want)

    def test_float_pool_is_mean(self, cnn_bundle, rng):
        x = rng.random((3,) + cnn_bundle.model.input_shape).astype(np.float32)
        _, record = float_forward(cnn_bundle.model, x)
        conv1 = record.layers["conv1"].post
        want = conv1.reshape(3, 4, 4, 2, 4, 2).mean(axis=(3, 5))
        assert np.allclose(record.layers["pool1"].post, want)

    def test_float_forward_single_sample(self, mlp_bundle):
        out, _ = float_forward(mlp_bundle.model, mlp_bundle.ds.inputs[0])
        assert out.shape == (10,)


class TestDecoders:
    def test_argmax_tie_lowest_index(self):
        assert argmax_decode(np.array([[3, 7, 7]])).tolist() == [1]
        assert argmax_decode(np.array([3, 7, 7])) == 1

    def test_argmax_empty_rejected(self):
        with pytest.raises(ValueError):
            argmax_decode(np.array([]))

    def test_yolo_single_box(self):
        grid, n_classes = (2, 2), 3
        o = np.zeros((4, 8))
        o[2] = [0.9, 0.5, 0.25, 2.0, 1.5, 0.1, 0.9, 0.3]
        boxes = yolo_decode(o.ravel(), 0.5, grid, n_classes)
        assert len(boxes) == 1
        box = boxes[0]
        assert box.cell == 2
        assert box.score == 0.9
        assert box.cx == pytest.approx((0 + 0.5) / 2)   # col 0 of row 1
        assert box.cy == pytest.approx((1 + 0.25) / 2)
        assert (box.w, box.h) == (2.0, 1.5)
        assert box.cls == 1

    def test_yolo_threshold_is_inclusive(self):
        o = np.zeros((1, 6))
        o[0, 0] = 0.5
        assert len(yolo_decode(o.ravel(), 0.5, (1, 1), 1)) == 1
        assert len(yolo_decode(o.ravel(), 0.500001, (1, 1), 1)) == 0

    def test_yolo_row_major_order(self):
        o = np.full((4, 5), 0.8)
        boxes = yolo_decode(o.ravel(), 0.5, (2, 2), 0)
        assert [b.cell for b in boxes] == [0, 1, 2, 3]
