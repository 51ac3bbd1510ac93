import numpy as np
import pytest
from hypothesis import given, strategies as st

from stemc.fixedpoint import from_real
from stemc.stem import (
    StemState,
    WireSchedule,
    accumulate_step,
    decode_train,
    encode_integer,
    encode_planes,
    generate_step,
    generate_train,
)


class TestWireSchedule:
    def test_signed_weights(self):
        s = WireSchedule(8, signed=True)
        assert s.weights().tolist() == [-128, 64, 32, 16, 8, 4, 2, 1]

    def test_unsigned_weights(self):
        s = WireSchedule(8, signed=False)
        assert s.weights().tolist() == [128, 64, 32, 16, 8, 4, 2, 1]

    def test_rejects_bad_length(self):
        with pytest.raises(ValueError):
            WireSchedule(1, signed=False)
        with pytest.raises(ValueError):
            WireSchedule(17, signed=True)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            WireSchedule(8, signed=False).weight(8)


class TestEncodeDecode:
    def test_83_bit_pattern(self):
        assert encode_integer(83, 8, signed=False).tolist() == [0, 1, 0, 1, 0, 0, 1, 1]

    def test_negative_twos_complement(self):
        # -1 is all ones over the wire
        assert encode_integer(-1, 8, signed=True).tolist() == [1] * 8

    def test_signed_roundtrip_exhaustive(self):
        sched = WireSchedule(8, signed=True)
        for q in range(-128, 128):
            assert decode_train(encode_integer(q, 8, signed=True), sched) == q

    def test_unsigned_roundtrip_exhaustive(self):
        sched = WireSchedule(8, signed=False)
        for q in range(0, 128):
            bits = encode_integer(q, 8, signed=False)
            assert bits[0] == 0          # sign-position step stays silent
            assert decode_train(bits, sched) == q

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            encode_integer(128, 8, signed=True)
        with pytest.raises(ValueError):
            encode_integer(-1, 8, signed=False)

    def test_planes_match_scalar_encode(self, rng):
        vals = rng.integers(-128, 128, size=(5, 11))
        planes = encode_planes(vals, 8, signed=True)
        assert planes.shape == (5, 11, 8)
        for i in range(5):
            for j in range(11):
                assert planes[i, j].tolist() == encode_integer(
                    int(vals[i, j]), 8, signed=True).tolist()

    def test_planes_range_check(self):
        with pytest.raises(ValueError):
            encode_planes(np.array([300]), 8, signed=False)

    def test_decode_length_mismatch(self):
        with pytest.raises(ValueError):
            decode_train(np.zeros(7), WireSchedule(8, signed=False))

    @given(st.integers(min_value=2, max_value=12),
           st.integers(min_value=0, max_value=4000))
    def test_roundtrip_any_k(self, k, q):
        q = q % (1 << (k - 1))
        sched = WireSchedule(k, signed=False)
        assert decode_train(encode_integer(q, k, signed=False), sched) == q

    def test_decode_linearity(self, rng):
        # decode(a) + decode(b) == decode over the union of spikes (disjoint)
        sched = WireSchedule(8, signed=True)
        bits = rng.integers(0, 2, size=(40, 8)).astype(np.uint8)
        brute = np.array(
            [sum(sched.weight(t) * int(b[t]) for t in range(8)) for b in bits])
        assert np.array_equal(decode_train(bits, sched), brute)


class TestGeneration:
    def test_83_emission(self):
        assert generate_train(np.array(83), 8).tolist() == [0, 1, 0, 1, 0, 0, 1, 1]

    def test_threshold_walk(self):
        v = 83
        spikes = []
        for t in range(8):
            s, v = generate_step(v, 8, t)
            spikes.append(s)
        assert spikes == [0, 1, 0, 1, 0, 0, 1, 1]
        assert v == 0

    def test_exhaustive_binary_expansion(self):
        sched = WireSchedule(8, signed=False)
        for v in range(0, 128):
            bits = generate_train(np.array(v), 8)
            assert decode_train(bits, sched) == v

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            generate_train(np.array([-1]), 8)
        with pytest.raises(ValueError):
            generate_step(-1, 8, 0)

    def test_suppression_zeroes_low_bits(self):
        sched = WireSchedule(8, signed=False)
        for v in (84, 83, 127, 7, 0):
            bits = generate_train(np.array(v), 8, suppress_below=3)
            assert decode_train(bits, sched) == v & ~0b111

    def test_suppression_only_masks_emission(self):
        full = generate_train(np.array(100), 8)
        cut = generate_train(np.array(100), 8, suppress_below=2)
        assert np.array_equal(full[..., :6], cut[..., :6])
        assert cut[..., 6:].sum() == 0


class TestStemState:
    def test_accumulate_single_synapse(self):
        # one weight-3 synapse spiking at the phi=4 step adds 12 to U
        state = StemState(1, acc_bits=16)
        sched = WireSchedule(8, signed=False)
        spikes = np.array([[1]], dtype=np.uint8)
        step = 5                     # k-1-step == bit position 2 -> phi 4
        sums = accumulate_step(state, spikes, np.array([[3]]), from_real(1.0),
                               sched, step)
        assert sums.tolist() == [[12]]
        assert state.u.tolist() == [[12]]

    def test_finalize_worked_value(self):
        state = StemState(1, acc_bits=16)
        state.u[:] = 41
        v = state.finalize(from_real(2.0), 1, 0, 127)
        assert v.tolist() == [[83]]

    def test_finalize_clamps(self):
        state = StemState(2, acc_bits=16)
        state.u[:] = np.array([300, -5])
        v = state.finalize(from_real(1.0), 0, 0, 127)
        assert v.tolist() == [[127, 0]]

    def test_integrate_saturates_and_counts(self):
        state = StemState(1, acc_bits=8, batch=1)
        m0 = from_real(1.0)
        state.integrate(np.array([[100]]), m0)
        state.integrate(np.array([[100]]), m0)
        assert state.u.tolist() == [[127]]
        assert state.saturations == 1
        state.integrate(np.array([[-300]]), m0)
        assert state.u.tolist() == [[-128]]
        assert state.saturations == 2

    def test_add_raw_saturates(self):
        state = StemState(1, acc_bits=8)
        state.u[:] = 120
        state.add_raw(np.array([[50]]))
        assert state.u.tolist() == [[127]]
        assert state.saturations == 1

    def test_scaled_integration(self):
        # U accumulates round(m0 * I_t) per step
        state = StemState(1, acc_bits=16)
        m0 = from_real(0.5)
        state.integrate(np.array([[7]]), m0)    # round(3.5) -> 4
        state.integrate(np.array([[-7]]), m0)   # round(-3.5) -> -4
        assert state.u.tolist() == [[0]]
