"""Spiking network simulator: compile a quantized net, run it bit-serially.

Compilation lowers every compute layer to a Population whose synapses are
materialized as an explicit table: fully-connected layers keep their dense
matrix, conv/pool layers become per-neuron gather tables (synapse index +
weight, padding mapped to a hardwired silent slot), residual joins become a
unit-weight sum over their two incoming trains. Execution then only ever
does table lookups and integer adds on spike bits - deliberately not the
sliding-window algebra of the reference oracle, so the two sides check each
other.

Two drivers share the populations:

* ``run_batch``    - layer-by-layer over a whole batch; one sample occupies
  the network for K*(stages+1) steps (stages of integration plus the output
  train's own transmission block).
* ``run_pipeline`` - a single global clock; the layer at stage l integrates
  sample s during steps [(l-1+s)K, (l+s)K), so a stream of S samples drains
  in exactly K*(stages+S) steps. Shortcut trains stay buffered until their
  join consumes them; within one global step producers always write before
  consumers read.

Both drivers must produce identical integers - the pipeline only reorders
work across samples, never within a neuron.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fixedpoint import FixedMult, apply
from .modelio import INPUT_NAME, conv_out_hw, pool_out_hw
from .sparsity import LayerSparsity, SparsityPlan, rot
from .stem import StemState, WireSchedule, decode_train, encode_planes, generate_train
from . import metrics


@dataclass(frozen=True)
class HardwareProfile:
    """Per-chip limits the compiled network is checked against."""

    acc_bits: int = 16
    weight_bits: int = 8
    max_fanin: int = 1024
    neurons_per_core: int = 1024
    cores: int = 128


@dataclass
class Population:
    name: str
    kind: str
    inputs: list[str]               # producer names, flatten resolved away
    in_shapes: list[tuple[int, ...]]
    out_shape: tuple[int, ...]
    n_out: int
    # synapse table (exactly one of the three forms)
    dense_w: np.ndarray | None      # [n_out, n_in] int64 (fully-connected)
    gather_idx: np.ndarray | None   # [n_out, F] int64 into padded input
    gather_w: np.ndarray | None     # [n_out, F] int64, silent-slot weight 0
    n_in_padded: int                # gather input length incl. silent slot
    fanin: int                      # real synapses of the busiest neuron
    fanouts: list[np.ndarray]       # per branch: synapses per input neuron
    # constants
    m0: FixedMult
    m1: FixedMult
    bias_pre_scaled: np.ndarray | None   # round(M0 * q_b), injected into U
    bias_post: np.ndarray | None         # output-scale bias, added after M1
    v_min: int
    v_max: int
    scale_out: float
    stage: int
    is_output: bool
    sparsity: LayerSparsity = LayerSparsity(0, 0)

    def step_sum(self, rows: list[np.ndarray], phis: list[int]) -> np.ndarray:
        """Wide synaptic sum for one wire step; rows are uint8 [N, n_in]."""
        total = None
        for row, phi in zip(rows, phis):
            r = row.astype(np.int64)
            if self.kind == "residual-add":
                part = r                       # unit weight, one synapse each
            elif self.dense_w is not None:
                part = r @ self.dense_w.T
            else:
                padded = np.concatenate(
                    [r, np.zeros((r.shape[0], 1), dtype=np.int64)], axis=1)
                part = (padded[:, self.gather_idx] * self.gather_w[None]).sum(axis=2)
            total = phi * part if total is None else total + phi * part
        return total

    def emit(self, v: np.ndarray, k: int) -> np.ndarray:
        """Output train of the clamped values (sparsified for hidden layers)."""
        if self.is_output:
            return encode_planes(v, k, signed=True)
        if self.sparsity.rot_bits:
            v = rot(v, self.sparsity.rot_bits, k)
        return generate_train(v, k, suppress_below=self.sparsity.drlo_bits)


@dataclass
class SpikingNetwork:
    name: str
    k: int
    acc_bits: int
    input_shape: tuple[int, ...]
    populations: list[Population]
    n_stages: int
    plan: SparsityPlan
    profile: HardwareProfile

    @property
    def output(self) -> Population:
        return self.populations[-1]


@dataclass
class LayerTrace:
    name: str
    kind: str
    sops: int
    spikes_in: int
    spikes_out: int
    saturations: int
    neurons: int


@dataclass
class RunResult:
    outputs: np.ndarray             # int64 [N, n_out], decoded output trains
    outputs_real: np.ndarray        # outputs * S_out of the last layer
    traces: list[LayerTrace]
    steps_per_sample: int
    n_stages: int
    trains: dict[str, np.ndarray] | None = None


# ---------------------------------------------------------------------------
# synapse table construction
# ---------------------------------------------------------------------------

def _conv_table(in_shape, attrs) -> tuple[np.ndarray, np.ndarray, int, int]:
    c, h, w = in_shape
    kh, kw = attrs["kernel"]
    s = int(attrs.get("stride", 1))
    p = int(attrs.get("padding", 0))
    oh, ow = conv_out_hw(h, w, attrs)
    silent = c * h * w
    ys = np.arange(oh)[:, None] * s - p + np.arange(kh)[None, :]      # [oh, kh]
    xs = np.arange(ow)[:, None] * s - p + np.arange(kw)[None, :]      # [ow, kw]
    vy = (ys >= 0) & (ys < h)
    vx = (xs >= 0) & (xs < w)
    spat = ys[:, None, :, None] * w + xs[None, :, None, :]            # oh,ow,kh,kw
    valid = vy[:, None, :, None] & vx[None, :, None, :]
    chan = np.arange(c)[None, None, :, None, None] * (h * w)
    idx = np.where(valid[:, :, None, :, :], chan + spat[:, :, None, :, :], silent)
    idx = idx.reshape(oh * ow, c * kh * kw)                           # (ic,dy,dx) order
    return idx, valid, oh * ow, silent


def _build_table(kind, attrs, in_shape, weights):
    """Returns (gather_idx [n_out,F], gather_w, n_in_padded, fanin)."""
    if kind == "conv2d":
        idx_sp, valid, n_pos, silent = _conv_table(in_shape, attrs)
        oc = int(attrs["out_channels"])
        gather_idx = np.tile(idx_sp, (oc, 1))
        wrow = weights.astype(np.int64).reshape(oc, -1)               # (ic,dy,dx)
        gather_w = np.repeat(wrow, n_pos, axis=0)
        gather_w = np.where(gather_idx == silent, 0, gather_w)
        fanin = int((gather_idx != silent).sum(axis=1).max())
        return gather_idx, gather_w, silent + 1, fanin
    if kind == "avgpool2d":
        c, h, w = in_shape
        kh, kw = attrs["kernel"]
        s = int(attrs.get("stride", kh))
        oh, ow = pool_out_hw(h, w, attrs)
        ys = np.arange(oh)[:, None] * s + np.arange(kh)[None, :]
        xs = np.arange(ow)[:, None] * s + np.arange(kw)[None, :]
        spat = (ys[:, None, :, None] * w + xs[None, :, None, :]).reshape(oh * ow, kh * kw)
        chan = np.arange(c)[:, None, None] * (h * w)
        gather_idx = (chan + spat[None]).reshape(c * oh * ow, kh * kw)
        gather_w = np.ones_like(gather_idx)
        return gather_idx, gather_w, c * h * w + 1, kh * kw
    raise ValueError(f"no synapse table for kind {kind!r}")


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------

def compile_network(qnet, plan: SparsityPlan | None = None,
                    profile: HardwareProfile | None = None,
                    strict_capacity: bool = False) -> SpikingNetwork:
    """Lower a quantized network onto populations with explicit synapses.

    Sparsity settings are taken from `plan` when given, else from the plan
    embedded in the network manifest, else no sparsification. Stage numbers
    (pipeline depth) are 1 + the deepest producer; flatten is transparent.
    """
    qnet.validate()
    profile = profile or HardwareProfile()
    if plan is None:
        plan = SparsityPlan.from_manifest(qnet.sparsity)

    shapes: dict[str, tuple[int, ...]] = {INPUT_NAME: tuple(qnet.input_shape)}
    alias: dict[str, str] = {INPUT_NAME: INPUT_NAME}
    stage: dict[str, int] = {INPUT_NAME: 0}
    pops: list[Population] = []
    last = qnet.layers[-1]
    for lyr in qnet.layers:
        shapes[lyr.name] = lyr.out_shape
        if lyr.kind == "flatten":
            alias[lyr.name] = alias[lyr.inputs[0]]
            continue
        alias[lyr.name] = lyr.name
        sources = [alias[s] for s in lyr.inputs]
        in_shapes = [shapes[s] for s in lyr.inputs]   # pre-flatten consumer view
        n_out = int(np.prod(lyr.out_shape))

        dense_w = gather_idx = gather_w = None
        n_in_padded = 0
        if lyr.kind == "fully-connected":
            dense_w = lyr.weights.astype(np.int64)
            fanin = dense_w.shape[1]
        elif lyr.kind == "residual-add":
            fanin = 2
        else:
            gather_idx, gather_w, n_in_padded, fanin = _build_table(
                lyr.kind, lyr.attrs, in_shapes[0], lyr.weights)

        if lyr.kind == "residual-add":
            fanouts = [np.ones(n_out, dtype=np.int64) for _ in sources]
        else:
            fanouts = [metrics.layer_fanout(lyr.kind, lyr.attrs, in_shapes[0])]

        bias_pre_scaled = bias_post = None
        if lyr.bias is not None:
            b = lyr.bias.astype(np.int64)
            if lyr.kind == "conv2d":          # per-channel -> per-neuron
                b = np.repeat(b, lyr.out_shape[1] * lyr.out_shape[2])
            if lyr.bias_scheme == "product":
                bias_pre_scaled = apply(lyr.m0, b)
            else:
                bias_post = b

        is_output = lyr is last
        pops.append(Population(
            name=lyr.name, kind=lyr.kind, inputs=sources,
            in_shapes=in_shapes, out_shape=lyr.out_shape, n_out=n_out,
            dense_w=dense_w, gather_idx=gather_idx, gather_w=gather_w,
            n_in_padded=n_in_padded, fanin=fanin, fanouts=fanouts,
            m0=lyr.m0, m1=lyr.m1,
            bias_pre_scaled=bias_pre_scaled, bias_post=bias_post,
            v_min=-qnet.q_max if is_output else 0, v_max=qnet.q_max,
            scale_out=lyr.scale_out, stage=0, is_output=is_output,
            sparsity=LayerSparsity(0, 0) if is_output else plan.for_layer(lyr.name),
        ))
        stage[lyr.name] = 1 + max(stage[s] for s in sources)
        pops[-1].stage = stage[lyr.name]

    snet = SpikingNetwork(
        name=qnet.name, k=qnet.k, acc_bits=qnet.acc_bits,
        input_shape=tuple(qnet.input_shape), populations=pops,
        n_stages=max(stage.values()), plan=plan, profile=profile,
    )
    report = check_capacity(snet, profile)
    if strict_capacity and report.violations:
        raise ValueError("capacity check failed: " + "; ".join(report.violations))
    return snet


# ---------------------------------------------------------------------------
# capacity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CapacityRow:
    name: str
    neurons: int
    fanin: int
    cores: int


@dataclass
class CapacityReport:
    rows: list[CapacityRow]
    total_cores: int
    violations: list[str] = field(default_factory=list)


def check_capacity(snet: SpikingNetwork, profile: HardwareProfile | None = None
                   ) -> CapacityReport:
    profile = profile or snet.profile
    rows = []
    violations = []
    if snet.acc_bits > profile.acc_bits:
        violations.append(
            f"accumulator width {snet.acc_bits} exceeds profile {profile.acc_bits}")
    w_hi = (1 << (profile.weight_bits - 1)) - 1
    for pop in snet.populations:
        cores = math.ceil(pop.n_out / profile.neurons_per_core)
        rows.append(CapacityRow(pop.name, pop.n_out, pop.fanin, cores))
        if pop.fanin > profile.max_fanin:
            violations.append(
                f"{pop.name}: fan-in {pop.fanin} exceeds {profile.max_fanin}")
        wmax = 0
        if pop.dense_w is not None:
            wmax = int(np.abs(pop.dense_w).max())
        elif pop.gather_w is not None:
            wmax = int(np.abs(pop.gather_w).max())
        if wmax > w_hi:
            violations.append(
                f"{pop.name}: weight magnitude {wmax} exceeds {profile.weight_bits}-bit range")
    total = sum(r.cores for r in rows)
    if total > profile.cores:
        violations.append(f"network needs {total} cores, profile has {profile.cores}")
    return CapacityReport(rows=rows, total_cores=total, violations=violations)


# ---------------------------------------------------------------------------
# batch driver
# ---------------------------------------------------------------------------

def _as_batch(x: np.ndarray, input_shape) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    if x.shape == tuple(input_shape):
        x = x[None, ...]
    elif x.shape[1:] != tuple(input_shape):
        raise ValueError(f"input shape {x.shape} does not match {input_shape}")
    return x.reshape(x.shape[0], -1)


def run_batch(snet: SpikingNetwork, x_int: np.ndarray,
              record_trains: bool = False) -> RunResult:
    """Sequential bit-serial execution of a batch; ground-truth order."""
    k = snet.k
    xb = _as_batch(x_int, snet.input_shape)
    n = xb.shape[0]
    trains: dict[str, np.ndarray] = {INPUT_NAME: encode_planes(xb, k, signed=True)}
    scheds = {INPUT_NAME: WireSchedule(k, signed=True)}
    traces: list[LayerTrace] = []
    for pop in snet.populations:
        in_trains = [trains[s] for s in pop.inputs]
        phis = [scheds[s] for s in pop.inputs]
        state = StemState(pop.n_out, snet.acc_bits, batch=n)
        for step in range(k):
            rows = [tr[:, :, step] for tr in in_trains]
            state.integrate(pop.step_sum(rows, [sc.weight(step) for sc in phis]),
                            pop.m0)
        if pop.bias_pre_scaled is not None:
            state.add_raw(pop.bias_pre_scaled[None, :])
        v = state.finalize(pop.m1, 0 if pop.bias_post is None else pop.bias_post,
                           pop.v_min, pop.v_max)
        out_train = pop.emit(v, k)
        trains[pop.name] = out_train
        scheds[pop.name] = WireSchedule(k, signed=pop.is_output)
        spikes_in = sum(int(tr.sum()) for tr in in_trains)
        sops = sum(metrics.count_sops(tr.sum(axis=(0, 2)), fo)
                   for tr, fo in zip(in_trains, pop.fanouts))
        traces.append(LayerTrace(
            name=pop.name, kind=pop.kind, sops=sops, spikes_in=spikes_in,
            spikes_out=int(out_train.sum()), saturations=state.saturations,
            neurons=pop.n_out))

    out_pop = snet.output
    outputs = decode_train(trains[out_pop.name], WireSchedule(k, signed=True))
    return RunResult(
        outputs=outputs,
        outputs_real=outputs.astype(np.float64) * out_pop.scale_out,
        traces=traces,
        steps_per_sample=k * (snet.n_stages + 1),
        n_stages=snet.n_stages,
        trains=trains if record_trains else None,
    )


# ---------------------------------------------------------------------------
# pipeline driver
# ---------------------------------------------------------------------------

@dataclass
class PipelineTiming:
    k: int
    n_stages: int
    n_samples: int
    total_steps: int
    buffered_train_peak: int
    stage_of: dict[str, int]


@dataclass
class PipelineResult:
    outputs: np.ndarray
    outputs_real: np.ndarray
    timing: PipelineTiming


def run_pipeline(snet: SpikingNetwork, x_int: np.ndarray) -> PipelineResult:
    """Stream a batch through the staged network on one global clock.

    Stage l integrates sample s during global steps [(l-1+s)K, (l+s)K); the
    output train of the last stage is itself transmitted during the following
    block, so S samples complete in exactly K*(n_stages + S) steps. Emitted
    trains are buffered until every consumer (a shortcut's join may lag) has
    read them.
    """
    k = snet.k
    xb = _as_batch(x_int, snet.input_shape)
    n_samples = xb.shape[0]
    n_stages = snet.n_stages
    input_planes = encode_planes(xb, k, signed=True)

    consumers: dict[str, int] = {INPUT_NAME: 0}
    for pop in snet.populations:
        consumers[pop.name] = 0
        for src in pop.inputs:
            consumers[src] += 1
    consumers[snet.output.name] += 1            # the external reader

    signed_of = {INPUT_NAME: True}
    for pop in snet.populations:
        signed_of[pop.name] = pop.is_output
    out_pop = snet.output
    reader_stage = out_pop.stage + 1            # decodes the final train

    emitted: dict[tuple[str, int], np.ndarray] = {}
    reads: dict[tuple[str, int], int] = {}
    states: dict[tuple[str, int], StemState] = {}
    out_acc = np.zeros((n_samples, out_pop.n_out), dtype=np.int64)
    out_sched = WireSchedule(k, signed=True)
    peak = 0
    last_active = -1

    def fetch(src: str, s: int) -> np.ndarray:
        if src == INPUT_NAME:
            return input_planes[s]
        return emitted[(src, s)]

    def release(src: str, s: int) -> None:
        if src == INPUT_NAME:
            return
        key = (src, s)
        reads[key] = reads.get(key, 0) + 1
        if reads[key] == consumers[src]:
            del emitted[key]

    total_steps = k * (n_stages + n_samples)
    for g in range(total_steps):
        block, step = divmod(g, k)
        for pop in snet.populations:
            s = block - (pop.stage - 1)
            if not 0 <= s < n_samples:
                continue
            last_active = g
            key = (pop.name, s)
            if key not in states:
                states[key] = StemState(pop.n_out, snet.acc_bits, batch=1)
            state = states[key]
            rows = [fetch(src, s)[None, :, step] for src in pop.inputs]
            phis = [WireSchedule(k, signed_of[src]).weight(step)
                    for src in pop.inputs]
            state.integrate(pop.step_sum(rows, phis), pop.m0)
            if step == k - 1:
                if pop.bias_pre_scaled is not None:
                    state.add_raw(pop.bias_pre_scaled[None, :])
                v = state.finalize(
                    pop.m1, 0 if pop.bias_post is None else pop.bias_post,
                    pop.v_min, pop.v_max)
                emitted[(pop.name, s)] = pop.emit(v, k)[0]
                del states[key]
                for src in pop.inputs:
                    release(src, s)
        s_out = block - (reader_stage - 1)
        if 0 <= s_out < n_samples:
            last_active = g
            bit = fetch(out_pop.name, s_out)[:, step].astype(np.int64)
            out_acc[s_out] += out_sched.weight(step) * bit
            if step == k - 1:
                release(out_pop.name, s_out)
        peak = max(peak, len(emitted))

    if emitted or states:
        raise RuntimeError("pipeline finished with undrained state")
    timing = PipelineTiming(
        k=k, n_stages=n_stages, n_samples=n_samples,
        total_steps=last_active + 1, buffered_train_peak=peak,
        stage_of={p.name: p.stage for p in snet.populations},
    )
    return PipelineResult(
        outputs=out_acc,
        outputs_real=out_acc.astype(np.float64) * out_pop.scale_out,
        timing=timing,
    )


# ---------------------------------------------------------------------------
# spike dumps
# ---------------------------------------------------------------------------

def rle_encode(bits: np.ndarray) -> str:
    """Alternating run lengths, zeros first: 0,0,1,1,1,0 -> "2 3 1"."""
    b = np.asarray(bits, dtype=np.uint8).reshape(-1)
    if b.size == 0:
        return ""
    edges = np.flatnonzero(np.diff(b)) + 1
    runs = np.diff(np.concatenate(([0], edges, [b.size])))
    if b[0] == 1:                       # leading zero-run of length 0
        runs = np.concatenate(([0], runs))
    return " ".join(str(int(r)) for r in runs)


def rle_decode(text: str, length: int) -> np.ndarray:
    runs = [int(t) for t in text.split()] if text.strip() else []
    out = np.zeros(length, dtype=np.uint8)
    pos = 0
    for i, r in enumerate(runs):
        if i % 2 == 1:
            out[pos:pos + r] = 1
        pos += r
    if pos != length:
        raise ValueError(f"run lengths cover {pos} bits, expected {length}")
    return out


def dump_spike_trains(path: str | Path, trains: dict[str, np.ndarray]) -> None:
    """One line per (layer, sample, step): `name sample step <runs>`."""
    with open(path, "w") as fh:
        for name, planes in trains.items():
            flat = planes.reshape(planes.shape[0], -1, planes.shape[-1])
            for s in range(flat.shape[0]):
                for t in range(flat.shape[2]):
                    fh.write(f"{name} {s} {t} {rle_encode(flat[s, :, t])}\n")
