"""Spike-count reduction on emitted trains.

Two knobs per hidden layer, both operating on the value V about to be
emitted:

* rot(V, drop_bits): round V off at `drop_bits` low bits (half away from
  zero), clamped back into the emittable range. 83 with 2 dropped bits
  becomes 84: the low "11" rounds up into "100".
* drlo(V, cut_bits): zero the lowest `cut_bits` bit positions outright, i.e.
  suppress the final `cut_bits` emission steps. 84 with 3 cut bits becomes 80.

Together (RoT first, then the cut during emission) 83 -> 84 -> 80, and its
train thins from 4 spikes to 2.

The hybrid tuner walks layers front to back; per layer it measures every
(rot, drlo) candidate on a calibration set, orders them by saved synaptic
operations, and keeps the most-saving setting whose cumulative accuracy drop
stays within the budget. Entirely deterministic: ties break on the smaller
(rot, drlo) pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger("stemc")

ROT_CANDIDATES = range(0, 4)     # drop_bits
DRLO_CANDIDATES = range(0, 5)    # cut_bits


def rot(v: int | np.ndarray, drop_bits: int, k: int) -> int | np.ndarray:
    """Round-off truncation of a non-negative value; result clamped to
    [0, 2^(k-1)-1]."""
    if drop_bits < 0:
        raise ValueError("drop_bits must be >= 0")
    arr = np.asarray(v)
    if arr.size and int(arr.min()) < 0:
        raise ValueError("rot is defined for non-negative values")
    if drop_bits == 0:
        out = np.minimum(arr, (1 << (k - 1)) - 1)
    else:
        unit = 1 << drop_bits
        out = ((arr + unit // 2) // unit) * unit      # v >= 0: half rounds up
        out = np.minimum(out, (1 << (k - 1)) - 1)
    return int(out) if np.isscalar(v) or np.asarray(v).ndim == 0 else out


def drlo(v: int | np.ndarray, cut_bits: int) -> int | np.ndarray:
    """Zero bit positions below cut_bits."""
    if cut_bits < 0:
        raise ValueError("cut_bits must be >= 0")
    mask = ~((1 << cut_bits) - 1)
    out = np.asarray(v) & mask
    return int(out) if np.isscalar(v) or np.asarray(v).ndim == 0 else out


@dataclass(frozen=True)
class LayerSparsity:
    rot_bits: int = 0
    drlo_bits: int = 0

    def is_identity(self) -> bool:
        return self.rot_bits == 0 and self.drlo_bits == 0


@dataclass
class SparsityPlan:
    """Per-hidden-layer (rot, drlo) settings; absent layers run unmodified."""

    entries: dict[str, LayerSparsity] = field(default_factory=dict)

    @staticmethod
    def identity() -> "SparsityPlan":
        return SparsityPlan({})

    @staticmethod
    def from_manifest(rows: list[dict]) -> "SparsityPlan":
        return SparsityPlan({
            r["layer"]: LayerSparsity(int(r.get("rot", 0)), int(r.get("drlo", 0)))
            for r in rows
        })

    def to_manifest(self) -> list[dict]:
        return [
            {"layer": name, "rot": s.rot_bits, "drlo": s.drlo_bits}
            for name, s in sorted(self.entries.items())
            if not s.is_identity()
        ]

    def for_layer(self, name: str) -> LayerSparsity:
        return self.entries.get(name, LayerSparsity())

    def is_identity(self) -> bool:
        return all(s.is_identity() for s in self.entries.values())

    def replaced(self, name: str, setting: LayerSparsity) -> "SparsityPlan":
        new = dict(self.entries)
        new[name] = setting
        return SparsityPlan(new)


@dataclass
class TuneStep:
    layer: str
    chosen: LayerSparsity
    sops: int
    accuracy: float


@dataclass
class TuneResult:
    plan: SparsityPlan
    baseline_sops: int
    baseline_accuracy: float
    final_sops: int
    final_accuracy: float
    steps: list[TuneStep] = field(default_factory=list)


def tune_hybrid(qnet, inputs_int: np.ndarray, labels: np.ndarray,
                accuracy_budget: float, include_io: bool = False) -> TuneResult:
    """Greedy front-to-back joint RoT+DRLO search under an accuracy budget.

    Args:
        qnet: quantized network (the plan applies to its hidden layers).
        inputs_int: quantized calibration inputs [N, *input_shape].
        labels: int class labels [N].
        accuracy_budget: max tolerated accuracy drop vs the unsparsified run
            (fraction of samples, e.g. 0.015).
        include_io: count first/last layer synaptic ops as well.

    Returns a TuneResult; the plan never degrades accuracy beyond the budget
    on the calibration inputs and falls back to identity per layer when every
    candidate overshoots.
    """
    from . import netsim   # local import: netsim depends on this module
    from .metrics import sop_total

    def evaluate(plan: SparsityPlan) -> tuple[int, float]:
        snet = netsim.compile_network(qnet, plan=plan)
        res = netsim.run_batch(snet, inputs_int)
        preds = np.argmax(res.outputs, axis=-1)
        acc = float(np.mean(preds == labels))
        return sop_total(res.traces, qnet, include_io=include_io), acc

    hidden = [
        lyr.name for lyr in qnet.layers
        if lyr.kind != "flatten" and lyr is not qnet.output_layer
    ]
    plan = SparsityPlan.identity()
    base_sops, base_acc = evaluate(plan)
    cur_sops, cur_acc = base_sops, base_acc
    steps: list[TuneStep] = []
    for name in hidden:
        candidates = []
        for rb in ROT_CANDIDATES:
            for db in DRLO_CANDIDATES:
                setting = LayerSparsity(rb, db)
                if setting.is_identity():
                    candidates.append((0, 0, 0, setting, cur_sops, cur_acc))
                    continue
                sops, acc = evaluate(plan.replaced(name, setting))
                candidates.append((-(cur_sops - sops), rb, db, setting, sops, acc))
        # most SOPs saved first; deterministic tie-break on (rot, drlo)
        candidates.sort(key=lambda c: (c[0], c[1], c[2]))
        for _, _, _, setting, sops, acc in candidates:
            if base_acc - acc <= accuracy_budget and sops <= cur_sops:
                if not setting.is_identity():
                    plan = plan.replaced(name, setting)
                cur_sops, cur_acc = sops, acc
                steps.append(TuneStep(name, setting, sops, acc))
                break
    log.info("tuned plan %s: sops %d -> %d, accuracy %.4f -> %.4f",
             plan.to_manifest(), base_sops, cur_sops, base_acc, cur_acc)
    return TuneResult(plan, base_sops, base_acc, cur_sops, cur_acc, steps)
