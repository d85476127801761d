"""Budgeted replay buffer: mean-of-features, random and full selection."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from nacl_pad.dataset import FeatureSample, stack
from nacl_pad.gmm import GmmModel
from nacl_pad.mlp import MlpModel, embed

STRATEGIES = ("mof", "random", "full")
LABEL_SOURCES = ("ground_truth", "predicted")


@dataclass(frozen=True)
class BufferEntry:
    sample: FeatureSample
    assigned_label: int
    label_source: str = "ground_truth"

    def __post_init__(self):
        if self.assigned_label not in (0, 1):
            raise ValueError(f"assigned label must be 0 or 1, got {self.assigned_label}")
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(f"unknown label source {self.label_source!r}")

    @property
    def polluted(self) -> bool:
        return self.assigned_label != int(self.sample.is_attack)


@dataclass(frozen=True)
class ReplayBuffer:
    """``budget_per_class`` of ``None`` means unbounded (used by ``full``)."""

    entries: tuple[BufferEntry, ...] = ()
    budget_per_class: int | None = 50
    strategy: str = "mof"

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.budget_per_class is not None:
            if self.budget_per_class < 0:
                raise ValueError(f"budget must be >= 0, got {self.budget_per_class}")
            counts = defaultdict(int)
            for e in self.entries:
                counts[e.assigned_label] += 1
            over = {c: n for c, n in counts.items() if n > self.budget_per_class}
            if over:
                raise ValueError(f"per-class budget {self.budget_per_class} exceeded: {over}")

    def __len__(self):
        return len(self.entries)

    def refill(self, candidates: Sequence[BufferEntry], gmm: GmmModel | None = None,
               encoder: MlpModel | None = None, seed: int = 0) -> ReplayBuffer:
        """New buffer chosen from ``candidates`` under this buffer's strategy."""
        if self.strategy == "full" or self.budget_per_class is None:
            chosen = dedupe(candidates)
        elif self.strategy == "mof":
            chosen = select_mof(candidates, gmm, encoder, self.budget_per_class)
        else:
            chosen = select_random(candidates, self.budget_per_class, seed)
        return ReplayBuffer(tuple(chosen), self.budget_per_class, self.strategy)


def dedupe(entries: Sequence[BufferEntry]) -> list[BufferEntry]:
    """Drop repeated sample ids, keeping the first occurrence."""
    seen, out = set(), []
    for e in entries:
        if e.sample.id not in seen:
            seen.add(e.sample.id)
            out.append(e)
    return out


def _by_class(entries):
    groups = defaultdict(list)
    for e in entries:
        groups[e.assigned_label].append(e)
    return groups


def select_mof(candidates: Sequence[BufferEntry], gmm: GmmModel, encoder: MlpModel,
               budget: int) -> list[BufferEntry]:
    """Per assigned class, the ``budget`` entries nearest that class's GMM mean.

    Distance is squared Euclidean in the encoder's embedding space; ties go
    to the smaller sample id.
    """
    out = []
    for label, group in sorted(_by_class(dedupe(candidates)).items()):
        if budget == 0:
            continue
        Z = embed(encoder, stack([e.sample for e in group]))
        dist = np.sum((Z - gmm.means[label]) ** 2, axis=1)
        ids = np.array([e.sample.id for e in group])
        order = np.lexsort((ids, dist))
        out.extend(group[i] for i in order[:budget])
    return out


def select_random(candidates: Sequence[BufferEntry], budget: int, seed: int) -> list[BufferEntry]:
    """Per assigned class, a uniform sample without replacement of min(budget, count)."""
    rng = np.random.default_rng(seed)
    out = []
    for label, group in sorted(_by_class(dedupe(candidates)).items()):
        group = sorted(group, key=lambda e: e.sample.id)
        if budget >= len(group):
            out.extend(group)
            continue
        picks = np.sort(rng.choice(len(group), size=budget, replace=False))
        out.extend(group[i] for i in picks)
    return out


def pollution_rate(entries) -> float:
    """Fraction of entries whose assigned label disagrees with the ground truth."""
    if isinstance(entries, ReplayBuffer):
        entries = entries.entries
    entries = list(entries)
    if not entries:
        return 0.0
    return sum(e.polluted for e in entries) / len(entries)


def dump_buffer(buffer: ReplayBuffer, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "true_class", "assigned_label", "label_source"])
        for e in sorted(buffer.entries, key=lambda e: e.sample.id):
            writer.writerow([e.sample.id, e.sample.true_class, e.assigned_label, e.label_source])
