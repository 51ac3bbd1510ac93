import numpy as np
import pytest

from stemc.sparsity import (
    LayerSparsity,
    SparsityPlan,
    drlo,
    rot,
    tune_hybrid,
)
from stemc.stem import generate_train


class TestRot:
    def test_rounds_low_bits_up(self):
        assert rot(83, 2, 8) == 84       # ...011 -> ...100

    def test_rounds_half_up(self):
        assert rot(2, 2, 8) == 4
        assert rot(1, 2, 8) == 0

    def test_clamps_to_emittable_max(self):
        assert rot(127, 1, 8) == 127
        assert rot(126, 3, 8) == 127

    def test_zero_bits_is_identity(self):
        for v in (0, 1, 83, 127):
            assert rot(v, 0, 8) == v

    def test_rejects_negative_value(self):
        with pytest.raises(ValueError):
            rot(-1, 1, 8)
        with pytest.raises(ValueError):
            rot(np.array([3, -2]), 1, 8)

    def test_rejects_negative_bits(self):
        with pytest.raises(ValueError):
            rot(5, -1, 8)

    def test_array_matches_scalar(self):
        vals = np.arange(128)
        out = rot(vals, 2, 8)
        assert isinstance(out, np.ndarray)
        assert out.tolist() == [rot(int(v), 2, 8) for v in vals]

    @pytest.mark.parametrize("rb", [1, 2, 3])
    def test_exhaustive_properties(self, rb):
        unit = 1 << rb
        for v in range(128):
            r = rot(v, rb, 8)
            assert 0 <= r <= 127
            assert r % unit == 0 or r == 127       # clamp may break alignment
            assert abs(r - v) <= unit // 2 + (unit - 1)  # clamp pullback bound
            if r % unit == 0 and v + unit // 2 <= 127:
                assert abs(r - v) <= unit // 2


class TestDrlo:
    def test_cuts_low_bits(self):
        assert drlo(84, 3) == 80
        assert drlo(7, 3) == 0
        assert drlo(127, 4) == 112

    def test_zero_cut_is_identity(self):
        assert drlo(83, 0) == 83

    def test_rejects_negative_bits(self):
        with pytest.raises(ValueError):
            drlo(5, -2)

    @pytest.mark.parametrize("cb", [1, 2, 3, 4])
    def test_exhaustive_properties(self, cb):
        for v in range(128):
            d = drlo(v, cb)
            assert d == (v >> cb) << cb
            assert 0 <= d <= v

    def test_array_form(self):
        out = drlo(np.array([84, 7, 127]), 3)
        assert out.tolist() == [80, 0, 120]


class TestSpikeThinning:
    def test_chain_83_to_80(self):
        after_rot = rot(83, 2, 8)
        assert after_rot == 84
        assert drlo(after_rot, 3) == 80
        before = int(generate_train(np.array(83), 8).sum())
        after = int(generate_train(np.array(after_rot), 8, suppress_below=3).sum())
        assert (before, after) == (4, 2)

    def test_never_adds_spikes_on_average(self):
        vals = np.arange(128)
        dense = generate_train(vals, 8).sum()
        thin = generate_train(drlo(vals, 2), 8).sum()
        assert thin <= dense


class TestPlan:
    def test_manifest_roundtrip_sorted(self):
        plan = SparsityPlan({
            "z": LayerSparsity(1, 2),
            "a": LayerSparsity(0, 3),
            "mid": LayerSparsity(0, 0),     # identity: dropped on export
        })
        manifest = plan.to_manifest()
        assert manifest == [
            {"layer": "a", "rot": 0, "drlo": 3},
            {"layer": "z", "rot": 1, "drlo": 2},
        ]
        back = SparsityPlan.from_manifest(manifest)
        assert back.for_layer("a") == LayerSparsity(0, 3)
        assert back.for_layer("z") == LayerSparsity(1, 2)
        assert back.for_layer("mid") == LayerSparsity(0, 0)

    def test_unknown_layer_defaults_identity(self):
        assert SparsityPlan.identity().for_layer("anything").is_identity()

    def test_replaced_leaves_original(self):
        base = SparsityPlan.identity()
        new = base.replaced("fc1", LayerSparsity(1, 1))
        assert base.is_identity()
        assert not new.is_identity()
        assert new.for_layer("fc1") == LayerSparsity(1, 1)


class TestTuner:
    def test_zero_budget_never_loses_accuracy(self, mlp_bundle):
        x = mlp_bundle.x_int[:24]
        y = mlp_bundle.ds.labels[:24]
        result = tune_hybrid(mlp_bundle.qnet, x, y, accuracy_budget=0.0)
        assert result.final_accuracy >= result.baseline_accuracy
        assert result.final_sops <= result.baseline_sops
        assert [s.layer for s in result.steps] == ["fc1", "fc2"]

    def test_plan_covers_only_hidden_layers(self, mlp_bundle):
        x = mlp_bundle.x_int[:24]
        y = mlp_bundle.ds.labels[:24]
        result = tune_hybrid(mlp_bundle.qnet, x, y, accuracy_budget=0.05)
        assert "fc3" not in result.plan.entries
        assert set(result.plan.entries) <= {"fc1", "fc2"}

    def test_deterministic(self, mlp_bundle):
        x = mlp_bundle.x_int[:16]
        y = mlp_bundle.ds.labels[:16]
        a = tune_hybrid(mlp_bundle.qnet, x, y, accuracy_budget=0.01)
        b = tune_hybrid(mlp_bundle.qnet, x, y, accuracy_budget=0.01)
        assert a.plan.to_manifest() == b.plan.to_manifest()
        assert a.final_sops == b.final_sops
