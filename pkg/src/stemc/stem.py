"""Bit-serial spiking neuron model: decode, scaled integration, encode.

A value is transmitted over K time steps as a binary spike train carrying its
two's-complement bits most-significant-first: the bit at position p is on the
wire at step ``K-1-p``. A receiving neuron therefore weights the spike row at
step t by

    phi(t) = -2^(K-1)   if the train is signed and t == 0 (sign bit)
             +2^(K-1-t) otherwise

and the weighted per-step sums, scaled by the overflow-protection constant M0,
accumulate into a saturating n-bit integrator U. After the K-th step the
integrator is rescheduled into the output value domain by M1, the bias is
added, and the clamped result V is emitted as a fresh train: at step t the
neuron fires iff V >= 2^(K-1-t), subtracting the threshold when it does. For
V in [0, 2^(K-1)-1] this greedy emission reproduces exactly the binary
expansion of V, so a following layer decodes the integer unchanged.

Negative values (final-layer logits) are emitted as signed two's-complement
trains directly; threshold emission is only defined for V >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fixedpoint import FixedMult, apply, saturate_array


@dataclass(frozen=True)
class WireSchedule:
    """Per-step decode weights of a K-step bit-serial wire."""

    steps: int          # K
    signed: bool

    def __post_init__(self) -> None:
        if not 2 <= self.steps <= 16:
            raise ValueError(f"train length {self.steps} outside [2, 16]")

    def weight(self, step: int) -> int:
        if not 0 <= step < self.steps:
            raise ValueError(f"step {step} outside [0, {self.steps})")
        if self.signed and step == 0:
            return -(1 << (self.steps - 1))
        return 1 << (self.steps - 1 - step)

    def weights(self) -> np.ndarray:
        return np.array([self.weight(t) for t in range(self.steps)], dtype=np.int64)


def encode_integer(q: int, k: int, signed: bool) -> np.ndarray:
    """Two's-complement spike train of q, MSB first. Returns uint8[k]."""
    lo = -(1 << (k - 1)) if signed else 0
    hi = (1 << (k - 1)) - 1
    if not lo <= q <= hi:
        raise ValueError(f"value {q} outside encodable range [{lo}, {hi}]")
    u = q & ((1 << k) - 1)
    return np.array([(u >> (k - 1 - t)) & 1 for t in range(k)], dtype=np.uint8)


def encode_planes(values: np.ndarray, k: int, signed: bool) -> np.ndarray:
    """Vectorized encode. Output shape = values.shape + (k,), step-major last axis."""
    v = np.asarray(values, dtype=np.int64)
    lo = -(1 << (k - 1)) if signed else 0
    hi = (1 << (k - 1)) - 1
    if v.size and (int(v.min()) < lo or int(v.max()) > hi):
        raise ValueError(f"values outside encodable range [{lo}, {hi}]")
    u = v & ((1 << k) - 1)
    shifts = np.arange(k - 1, -1, -1, dtype=np.int64)  # bit position per step
    return ((u[..., None] >> shifts) & 1).astype(np.uint8)


def decode_train(bits: np.ndarray, schedule: WireSchedule) -> int | np.ndarray:
    """Sum of phi(t) * bit(t); inverse of encode for in-range values."""
    b = np.asarray(bits, dtype=np.int64)
    if b.shape[-1] != schedule.steps:
        raise ValueError("train length does not match schedule")
    total = b @ schedule.weights()
    return int(total) if total.ndim == 0 else total


class StemState:
    """Saturating accumulator bank for one population (batched over samples).

    The integrator is an ``acc_bits``-wide signed integer per neuron; every
    clamp is counted as a saturation event.
    """

    def __init__(self, n_neurons: int, acc_bits: int, batch: int = 1):
        self.acc_bits = acc_bits
        self.u = np.zeros((batch, n_neurons), dtype=np.int64)
        self.saturations = 0

    def integrate(self, step_sums: np.ndarray, m0: FixedMult) -> None:
        """One decode step: U <- saturate(U + round(M0 * I_t))."""
        inc = apply(m0, step_sums)
        self.u, events = saturate_array(self.u + inc, self.acc_bits)
        self.saturations += events

    def add_raw(self, addend: np.ndarray) -> None:
        """Saturating add of a precomputed integer (product-scheme bias)."""
        self.u, events = saturate_array(self.u + addend, self.acc_bits)
        self.saturations += events

    def finalize(
        self,
        m1: FixedMult,
        bias_post: np.ndarray | int,
        v_min: int,
        v_max: int,
    ) -> np.ndarray:
        """V = clamp(round(M1 * U) + bias, v_min, v_max)."""
        v = apply(m1, self.u) + bias_post
        return np.clip(v, v_min, v_max)


def accumulate_step(
    state: StemState,
    spikes: np.ndarray,
    weights: np.ndarray,
    m0: FixedMult,
    schedule: WireSchedule,
    step: int,
) -> np.ndarray:
    """Reference single-step decode for a dense weight matrix.

    spikes: uint8[batch, n_in] row at `step`; weights: int[n_out, n_in].
    Returns the wide per-neuron step sum I_t that was integrated.
    """
    phi = schedule.weight(step)
    wide = spikes.astype(np.int64) @ weights.T.astype(np.int64)
    step_sums = phi * wide
    state.integrate(step_sums, m0)
    return step_sums


def generate_step(v: int, k: int, step: int) -> tuple[int, int]:
    """One emission step: returns (spike, v_after). Requires v >= 0."""
    if v < 0:
        raise ValueError("threshold emission is defined for non-negative values")
    theta = 1 << (k - 1 - step)
    if v >= theta:
        return 1, v - theta
    return 0, v


def generate_train(v: np.ndarray, k: int, suppress_below: int = 0) -> np.ndarray:
    """Greedy MSB-first emission of non-negative values.

    suppress_below > 0 masks the spikes that would carry bit positions below
    that index (the last `suppress_below` steps); the internal residue update
    still runs, so the transmitted value is exactly v with those bits zeroed.
    Output shape = v.shape + (k,).
    """
    work = np.array(v, dtype=np.int64, copy=True)
    if work.size and int(work.min()) < 0:
        raise ValueError("threshold emission is defined for non-negative values")
    bits = np.zeros(work.shape + (k,), dtype=np.uint8)
    for step in range(k):
        theta = np.int64(1 << (k - 1 - step))
        fire = work >= theta
        work -= theta * fire
        if (k - 1 - step) >= suppress_below:
            bits[..., step] = fire
    return bits
