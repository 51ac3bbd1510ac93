"""Reference engines: float forward pass and the integer oracle.

The integer oracle is the ground truth the spiking simulator is judged
against. It runs in three modes:

* ``direct``  - one-shot requantization: round(M_hat * sum(W~ X~)) plus bias,
  clamped. The textbook quantized-inference form; used for bias-scheme
  analysis and reporting.
* ``wide``    - the scaled-integration arithmetic (per-step M0 rounding over
  the MSB-first bit planes of the inputs, final M1 rescale) with an unbounded
  accumulator. Equals ``hw`` whenever nothing saturates, by construction.
* ``hw``      - same as ``wide`` but the accumulator saturates at the
  configured width, with every clamp counted. This is the mode the spiking
  simulator must reproduce integer-for-integer.

All three share the FixedMult rounding primitive; the linear algebra here is
deliberately organized differently from the simulator's (shifted-slice
convolutions vs gather tables) so the two sides are independent
implementations of the same contract.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import apply, saturate_array
from .modelio import INPUT_NAME, conv_out_hw, pool_out_hw
from .stem import WireSchedule, encode_planes


@dataclass
class LayerActivation:
    pre: np.ndarray       # accumulator-domain integers (or wide sum / float pre-act)
    post: np.ndarray      # layer output in its own value domain
    saturations: int = 0


@dataclass
class ActivationRecord:
    layers: dict[str, LayerActivation] = field(default_factory=dict)

    def dump_csv(self, path) -> None:
        """Layer-wise flat dump for diffing runs."""
        with open(path, "w") as fh:
            fh.write("layer,sample,index,pre,post\n")
            for name, act in self.layers.items():
                pre = np.asarray(act.pre).reshape(len(np.asarray(act.post)), -1)
                post = np.asarray(act.post).reshape(pre.shape[0], -1)
                for s in range(pre.shape[0]):
                    for j in range(pre.shape[1]):
                        fh.write(f"{name},{s},{j},{pre[s, j]},{post[s, j]}\n")


def _ensure_batch(x: np.ndarray, input_shape: tuple[int, ...]) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.shape == tuple(input_shape):
        return x[None, ...], True
    if x.shape[1:] == tuple(input_shape):
        return x, False
    raise ValueError(f"input shape {x.shape} does not match model input {input_shape}")


# ---------------------------------------------------------------------------
# linear pieces (shifted-slice style; the simulator uses gather tables)
# ---------------------------------------------------------------------------

def _conv2d(x: np.ndarray, w: np.ndarray, attrs: dict) -> np.ndarray:
    n, c, h, wd = x.shape
    kh, kw = attrs["kernel"]
    s = int(attrs.get("stride", 1))
    p = int(attrs.get("padding", 0))
    oh, ow = conv_out_hw(h, wd, attrs)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, w.shape[0], oh, ow), dtype=x.dtype)
    for ic in range(c):
        for dy in range(kh):
            for dx in range(kw):
                sl = xp[:, ic, dy:dy + s * (oh - 1) + 1:s, dx:dx + s * (ow - 1) + 1:s]
                out += w[None, :, ic, dy, dx, None, None] * sl[:, None, :, :]
    return out


def _pool_sum(x: np.ndarray, attrs: dict) -> np.ndarray:
    n, c, h, wd = x.shape
    kh, kw = attrs["kernel"]
    s = int(attrs.get("stride", kh))
    oh, ow = pool_out_hw(h, wd, attrs)
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            out += x[:, :, dy:dy + s * (oh - 1) + 1:s, dx:dx + s * (ow - 1) + 1:s]
    return out


def _linear(kind: str, attrs: dict, weights: np.ndarray | None,
            xs: list[np.ndarray]) -> np.ndarray:
    """Weighted sum of a layer, no bias, no scaling. Batched [N, ...]."""
    if kind == "fully-connected":
        return xs[0] @ weights.T
    if kind == "conv2d":
        return _conv2d(xs[0], weights, attrs)
    if kind == "avgpool2d":
        return _pool_sum(xs[0], attrs)
    if kind == "residual-add":
        return xs[0] + xs[1]
    if kind == "flatten":
        return xs[0].reshape(xs[0].shape[0], -1)
    raise ValueError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# float reference
# ---------------------------------------------------------------------------

def float_forward(model, x: np.ndarray) -> tuple[np.ndarray, ActivationRecord]:
    """Float64 forward pass. Hidden fc/conv layers apply bias then ReLU."""
    xb, single = _ensure_batch(x, model.input_shape)
    tensors = {INPUT_NAME: xb.astype(np.float64)}
    record = ActivationRecord()
    out = None
    for lyr in model.layers:
        xs = [tensors[s] for s in lyr.inputs]
        pre = _linear(lyr.kind, lyr.attrs, lyr.weights, xs)
        if lyr.kind == "avgpool2d":
            kh, kw = lyr.attrs["kernel"]
            pre = pre / (kh * kw)
        if lyr.bias is not None:
            pre = pre + lyr.bias.reshape((1, -1) + (1,) * (pre.ndim - 2))
        post = np.maximum(pre, 0.0) if lyr.activation == "relu" else pre
        record.layers[lyr.name] = LayerActivation(pre, post)
        tensors[lyr.name] = post
        out = post
    out2 = out.reshape(out.shape[0], -1)
    return (out2[0] if single else out2), record


# ---------------------------------------------------------------------------
# integer oracle
# ---------------------------------------------------------------------------

INT_MODES = ("direct", "wide", "hw")


def _signedness(qnet) -> dict[str, bool]:
    signed = {INPUT_NAME: True}
    for lyr in qnet.layers:
        signed[lyr.name] = signed[lyr.inputs[0]] if lyr.kind == "flatten" else False
    return signed


@dataclass
class LayerStats:
    """Wide-range statistics collected during a calibration pass."""

    max_abs_step: int = 0      # max |I_t| over neurons/samples/steps
    max_abs_prefix: int = 0    # max |sum_{t<=tau} I_t|
    max_abs_total: int = 0     # max |sum_t I_t| == max |sum W~ X~|
    u_min: int = 0             # wide accumulator extremes (incl. bias inject)
    u_max: int = 0

    @staticmethod
    def merge(a: "LayerStats", b: "LayerStats") -> "LayerStats":
        """Associative max-reduction; batching samples must not change stats."""
        return LayerStats(
            max(a.max_abs_step, b.max_abs_step),
            max(a.max_abs_prefix, b.max_abs_prefix),
            max(a.max_abs_total, b.max_abs_total),
            min(a.u_min, b.u_min),
            max(a.u_max, b.u_max),
        )


def int_forward(qnet, x_int: np.ndarray, mode: str = "hw",
                stats: dict[str, "LayerStats"] | None = None,
                ) -> tuple[np.ndarray, ActivationRecord]:
    """Integer forward pass of a quantized network.

    Args:
        qnet: QuantizedNetwork (constants already frozen).
        x_int: quantized input, shape == input_shape or [N, *input_shape].
        mode: "direct", "wide" or "hw" (see module docstring).
        stats: optional dict filled with per-layer wide-range statistics
            (only meaningful for the bit-plane modes; used by calibration).

    Returns:
        (outputs [N, n_out] int64, ActivationRecord)
    """
    if mode not in INT_MODES:
        raise ValueError(f"mode must be one of {INT_MODES}")
    xb, single = _ensure_batch(x_int, qnet.input_shape)
    xb = xb.astype(np.int64)
    k = qnet.k
    q_max = (1 << (k - 1)) - 1
    signed = _signedness(qnet)
    tensors: dict[str, np.ndarray] = {INPUT_NAME: xb}
    record = ActivationRecord()
    out = None
    for lyr in qnet.layers:
        xs = [tensors[s] for s in lyr.inputs]
        if lyr.kind == "flatten":
            post = xs[0].reshape(xs[0].shape[0], -1)
            record.layers[lyr.name] = LayerActivation(post, post)
            tensors[lyr.name] = post
            out = post
            continue

        lo, hi = (-q_max, q_max) if lyr is qnet.layers[-1] else (0, q_max)
        bias_pre = bias_post = None
        if lyr.bias is not None:
            b = lyr.bias.astype(np.int64)
            if lyr.kind == "conv2d":          # per-channel -> per-neuron
                b = np.repeat(b, lyr.out_shape[1] * lyr.out_shape[2])
            if lyr.bias_scheme == "product":
                bias_pre = b
            else:
                bias_post = b

        if mode == "direct":
            s = _linear(lyr.kind, lyr.attrs, _w64(lyr), xs)
            s2 = s.reshape(s.shape[0], -1)
            if bias_pre is not None:
                s2 = s2 + bias_pre
            v = apply(lyr.m_hat, s2)
            if bias_post is not None:
                v = v + bias_post
            post2 = np.clip(v, lo, hi)
            pre_rec, sat = s2, 0
        else:
            post2, pre_rec, sat = _scaled_layer(
                lyr, xs, [signed[s] for s in lyr.inputs], k, qnet.acc_bits,
                lo, hi, bias_pre, bias_post,
                emulate=(mode == "hw"),
                stats=None if stats is None else stats.setdefault(lyr.name, LayerStats()),
            )

        post = post2.reshape((post2.shape[0],) + lyr.out_shape)
        record.layers[lyr.name] = LayerActivation(pre_rec, post2, sat)
        tensors[lyr.name] = post
        out = post2
    return (out[0] if single else out), record


def _w64(lyr) -> np.ndarray | None:
    return None if lyr.weights is None else lyr.weights.astype(np.int64)


def _scaled_layer(lyr, xs, xsigned, k, acc_bits, lo, hi, bias_pre, bias_post,
                  emulate: bool, stats: LayerStats | None):
    """Bit-plane walk of one layer: per-step M0 rounding, final M1 rescale."""
    n = xs[0].shape[0]
    planes = [encode_planes(x.reshape(n, -1), k, sg) for x, sg in zip(xs, xsigned)]
    schedules = [WireSchedule(k, sg) for sg in xsigned]
    w = _w64(lyr)
    u = None
    prefix = None
    saturations = 0
    for step in range(k):
        step_sum = None
        for x, pl, sched in zip(xs, planes, schedules):
            row = pl[..., step].astype(np.int64).reshape(x.shape)
            if lyr.kind == "residual-add":
                part = row          # unit weights, one synapse per branch
            else:
                part = _linear(lyr.kind, lyr.attrs, w, [row])
            part = sched.weight(step) * part.reshape(n, -1)
            step_sum = part if step_sum is None else step_sum + part
        if u is None:
            u = np.zeros_like(step_sum)
            prefix = np.zeros_like(step_sum)
        if stats is not None:
            prefix = prefix + step_sum
            stats.max_abs_step = max(stats.max_abs_step, int(np.abs(step_sum).max()))
            stats.max_abs_prefix = max(stats.max_abs_prefix, int(np.abs(prefix).max()))
        u = u + apply(lyr.m0, step_sum)
        if emulate:
            u, ev = saturate_array(u, acc_bits)
            saturations += ev
        if stats is not None:
            stats.u_min = min(stats.u_min, int(u.min()))
            stats.u_max = max(stats.u_max, int(u.max()))
    if stats is not None:
        stats.max_abs_total = max(stats.max_abs_total, int(np.abs(prefix).max()))
    if bias_pre is not None:
        u = u + apply(lyr.m0, bias_pre)
        if emulate:
            u, ev = saturate_array(u, acc_bits)
            saturations += ev
        if stats is not None:
            stats.u_min = min(stats.u_min, int(u.min()))
            stats.u_max = max(stats.u_max, int(u.max()))
    v = apply(lyr.m1, u)
    if bias_post is not None:
        v = v + bias_post
    return np.clip(v, lo, hi), u, saturations


# ---------------------------------------------------------------------------
# output decoding
# ---------------------------------------------------------------------------

def argmax_decode(outputs: np.ndarray) -> int | np.ndarray:
    """Class index of the max logit; ties resolve to the lowest index."""
    o = np.asarray(outputs)
    if o.size == 0:
        raise ValueError("empty output vector")
    if o.ndim == 1:
        return int(np.argmax(o))
    return np.argmax(o, axis=-1)


@dataclass(frozen=True)
class Box:
    cell: int
    score: float
    cx: float
    cy: float
    w: float
    h: float
    cls: int


def yolo_decode(outputs: np.ndarray, conf_threshold: float,
                grid: tuple[int, int], n_classes: int) -> list[Box]:
    """Minimal single-box-per-cell grid decode.

    Each cell carries (confidence, cx, cy, w, h, class scores...). Cells at or
    above the confidence threshold produce one box; centers are offset by the
    cell position and normalized by the grid size. Deterministic: cells scan
    in row-major order.
    """
    gy, gx = grid
    per_cell = 5 + n_classes
    o = np.asarray(outputs, dtype=np.float64).reshape(gy * gx, per_cell)
    boxes = []
    for idx in range(gy * gx):
        conf = float(o[idx, 0])
        if conf < conf_threshold:
            continue
        cy_i, cx_i = divmod(idx, gx)
        cls = int(np.argmax(o[idx, 5:])) if n_classes else 0
        boxes.append(Box(
            cell=idx, score=conf,
            cx=(cx_i + float(o[idx, 1])) / gx,
            cy=(cy_i + float(o[idx, 2])) / gy,
            w=float(o[idx, 3]), h=float(o[idx, 4]), cls=cls,
        ))
    return boxes
