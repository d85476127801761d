"""APCER / BPCER / ACER and learning-curve aggregation."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

METRIC_FIELDS = ("apcer", "bpcer", "acer", "pollution_buffer", "pollution_used", "novel_detected")


@dataclass(frozen=True)
class EvalOutcome:
    n_attack: int
    n_bonafide: int
    attack_as_bonafide: int
    bonafide_as_attack: int

    def __post_init__(self):
        if min(self.n_attack, self.n_bonafide, self.attack_as_bonafide,
               self.bonafide_as_attack) < 0:
            raise ValueError("counts must be non-negative")
        if self.attack_as_bonafide > self.n_attack:
            raise ValueError("more misread attacks than attacks")
        if self.bonafide_as_attack > self.n_bonafide:
            raise ValueError("more misread bona-fide samples than bona-fide samples")

    @classmethod
    def from_predictions(cls, is_attack, predicted_attack) -> EvalOutcome:
        truth = np.asarray(is_attack, dtype=bool)
        pred = np.asarray(predicted_attack, dtype=bool)
        return cls(int(truth.sum()), int((~truth).sum()),
                   int((truth & ~pred).sum()), int((~truth & pred).sum()))


def apcer(o: EvalOutcome) -> float:
    if o.n_attack == 0:
        raise ZeroDivisionError("APCER undefined: no attack samples")
    return o.attack_as_bonafide / o.n_attack


def bpcer(o: EvalOutcome) -> float:
    if o.n_bonafide == 0:
        raise ZeroDivisionError("BPCER undefined: no bona-fide samples")
    return o.bonafide_as_attack / o.n_bonafide


def acer(o: EvalOutcome) -> float:
    return (apcer(o) + bpcer(o)) / 2


def aggregate_curves(records: Iterable) -> list[dict]:
    """Per (method, task_index): mean and population std of each metric across seeds.

    Every seed of a method must cover the same task indices. ``None`` metric
    values (not applicable to a method) stay ``None``.
    """
    groups = defaultdict(lambda: defaultdict(list))
    steps = defaultdict(lambda: defaultdict(set))
    for r in records:
        groups[(r.method, r.task_index)][r.seed].append(r)
        steps[r.method][r.seed].add(r.task_index)
    for method, by_seed in steps.items():
        ref_seed = min(by_seed)
        for seed, idx in sorted(by_seed.items()):
            if idx != by_seed[ref_seed]:
                raise ValueError(f"method {method!r}: seed {seed} has steps {sorted(idx)}, "
                                 f"seed {ref_seed} has {sorted(by_seed[ref_seed])}")
    out = []
    for (method, t), by_seed in sorted(groups.items()):
        rows = [r for seed in sorted(by_seed) for r in by_seed[seed]]
        row = {"method": method, "task_index": t, "n_seeds": len(by_seed)}
        for name in METRIC_FIELDS:
            vals = [getattr(r, name) for r in rows]
            if any(v is None for v in vals):
                row[f"{name}_mean"] = row[f"{name}_std"] = None
            else:
                arr = np.asarray(vals, dtype=np.float64)
                row[f"{name}_mean"] = float(arr.mean())
                row[f"{name}_std"] = float(arr.std())
        out.append(row)
    return out


def mean_metric(records: Sequence, name: str, task_index: int | None = None) -> float:
    """Mean of one metric over seeds, at ``task_index`` (default: last step)."""
    if task_index is None:
        task_index = max(r.task_index for r in records)
    vals = [getattr(r, name) for r in records if r.task_index == task_index]
    return float(np.mean(vals))
