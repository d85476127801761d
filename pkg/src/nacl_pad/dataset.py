"""Feature samples, task streams, synthetic generation and feature-table I/O."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

BONAFIDE = 0
SPLITS = ("train", "test")


class PlacementError(ValueError):
    """Cluster means cannot be placed under the requested constraints."""


class FeatureTableError(ValueError):
    """Base class for malformed feature tables."""


class ColumnCountError(FeatureTableError):
    pass


class NonNumericCellError(FeatureTableError):
    pass


class UnknownSplitError(FeatureTableError):
    pass


@dataclass(frozen=True)
class FeatureSample:
    id: int
    features: np.ndarray = field(compare=False, repr=False)
    true_class: int
    split: str = "train"
    group: str | None = field(default=None, compare=False)

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1 or feats.size == 0:
            raise ValueError(f"sample {self.id}: features must be a nonempty vector")
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"sample {self.id}: non-finite feature")
        if self.true_class < 0:
            raise ValueError(f"sample {self.id}: negative class id {self.true_class}")
        if self.split not in SPLITS:
            raise ValueError(f"sample {self.id}: unknown split {self.split!r}")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)

    @property
    def is_attack(self) -> bool:
        return self.true_class != BONAFIDE

    def same_as(self, other: FeatureSample) -> bool:
        return (self.id == other.id and self.true_class == other.true_class
                and self.split == other.split
                and np.array_equal(self.features, other.features))


def stack(samples: Sequence[FeatureSample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 0))
    return np.vstack([s.features for s in samples])


def binary_labels(samples: Sequence[FeatureSample]) -> np.ndarray:
    return np.array([int(s.is_attack) for s in samples], dtype=np.int64)


@dataclass(frozen=True)
class LabeledDataset:
    samples: tuple[FeatureSample, ...]
    assigned_labels: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "assigned_labels", tuple(int(v) for v in self.assigned_labels))
        if len(self.samples) != len(self.assigned_labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.assigned_labels)} labels")
        if any(v not in (0, 1) for v in self.assigned_labels):
            raise ValueError("assigned labels must be binary")

    @classmethod
    def ground_truth(cls, samples: Sequence[FeatureSample]) -> LabeledDataset:
        return cls(tuple(samples), tuple(int(s.is_attack) for s in samples))

    def __len__(self):
        return len(self.samples)

    @property
    def X(self) -> np.ndarray:
        return stack(self.samples)

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self.assigned_labels, dtype=np.int64)


@dataclass(frozen=True)
class TaskStream:
    """Initial labeled data, unlabeled task batches and a fixed test split.

    ``attack_pool`` keeps the training samples of every scheduled attack class
    and ``bonafide_chunks`` the bona-fide share of each step, so that batches
    can be recomposed when the attack order is decided on the fly.
    """

    initial: LabeledDataset
    tasks: tuple[tuple[FeatureSample, ...], ...]
    attack_schedule: Mapping[int, tuple[int, ...]]
    test_set: tuple[FeatureSample, ...]
    initial_classes: tuple[int, ...] = (BONAFIDE, 1)
    attack_pool: Mapping[int, tuple[FeatureSample, ...]] = field(default_factory=dict)
    bonafide_chunks: tuple[tuple[FeatureSample, ...], ...] = ()

    def __post_init__(self):
        for t, batch in enumerate(self.tasks, start=1):
            if not batch:
                raise ValueError(f"task batch {t} is empty")
        seen = set(self.initial_classes)
        for t, classes in sorted(self.attack_schedule.items()):
            for c in classes:
                if c in seen:
                    raise ValueError(f"attack class {c} scheduled twice")
                seen.add(c)
        test_ids = {s.id for s in self.test_set}
        used = {s.id for s in self.initial.samples}
        for batch in self.tasks:
            used.update(s.id for s in batch)
        if test_ids & used:
            raise ValueError(f"test set overlaps training ids {sorted(test_ids & used)[:5]}")

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def dimension(self) -> int:
        return self.initial.samples[0].features.size

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(sorted({s.true_class for s in self.test_set}
                            | set(self.initial_classes)
                            | {c for cs in self.attack_schedule.values() for c in cs}))

    def batch_for(self, step: int, classes: Sequence[int]) -> tuple[FeatureSample, ...]:
        """Task batch of ``step`` (1-based) carrying the given attack classes."""
        bona = self.bonafide_chunks[step - 1] if self.bonafide_chunks else ()
        attacks = [s for c in classes for s in self.attack_pool[c]]
        return tuple(sorted((*bona, *attacks), key=lambda s: s.id))

    def with_schedule(self, schedule: Mapping[int, Sequence[int]]) -> TaskStream:
        schedule = {int(t): tuple(cs) for t, cs in schedule.items()}
        tasks = tuple(self.batch_for(t, schedule[t]) for t in sorted(schedule))
        return TaskStream(self.initial, tasks, schedule, self.test_set,
                          self.initial_classes, self.attack_pool, self.bonafide_chunks)


def build_protocol(stream_classes: Sequence[int], attacks_per_task: int,
                   ordering: Sequence[int] | None = None) -> dict[int, tuple[int, ...]]:
    """Chunk the attack order into tasks; class 1 is always in the initial set."""
    if attacks_per_task not in (1, 2):
        raise ValueError(f"attacks_per_task must be 1 or 2, got {attacks_per_task}")
    expected = sorted(c for c in set(stream_classes) if c >= 2)
    ordering = list(expected if ordering is None else ordering)
    missing = sorted(set(expected) - set(ordering))
    dupes = sorted({c for c in ordering if ordering.count(c) > 1})
    extra = sorted(set(ordering) - set(expected))
    if missing or dupes or extra:
        raise ValueError(
            f"ordering is not a permutation of {expected}: "
            f"missing={missing} duplicate={dupes} unexpected={extra}")
    return {k + 1: tuple(ordering[i:i + attacks_per_task])
            for k, i in enumerate(range(0, len(ordering), attacks_per_task))}


def split_grandtest(samples: Sequence[FeatureSample], test_fraction: float, seed: int):
    """Per-class proportional train/test partition.

    Each class sends ``round(count * test_fraction)`` (at least 1) samples to
    test. When every bona-fide sample carries a ``group``, bona-fide groups are
    assigned whole so the two splits share no group.
    """
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    by_class = defaultdict(list)
    for s in samples:
        by_class[s.true_class].append(s)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in sorted(by_class):
        members = sorted(by_class[cls], key=lambda s: s.id)
        if len(members) < 2:
            raise ValueError(f"class {cls} has {len(members)} sample(s); need at least 2")
        n_test = max(1, int(round(len(members) * test_fraction)))
        if cls == BONAFIDE and all(s.group is not None for s in members):
            picked = _group_disjoint(members, n_test, rng)
        else:
            order = rng.permutation(len(members))
            picked = {members[i].id for i in order[:n_test]}
        for s in members:
            (test if s.id in picked else train).append(
                FeatureSample(s.id, s.features, s.true_class,
                              "test" if s.id in picked else "train", s.group))
    return train, test


def _group_disjoint(members, n_test, rng):
    groups = defaultdict(list)
    for s in members:
        groups[s.group].append(s.id)
    names = sorted(groups)
    picked = set()
    for i in rng.permutation(len(names)):
        if len(picked) >= n_test:
            break
        picked.update(groups[names[i]])
    if len(picked) == len(members):
        raise ValueError("bona-fide groups cannot be split: one group holds every sample")
    return picked


def _place_means(n_clusters, d, separation, rng):
    if d < n_clusters - 1:
        raise PlacementError(
            f"placing {n_clusters} clusters pairwise {separation} apart needs "
            f"dimension >= {n_clusters - 1}, got d={d}")
    # regular simplex in R^n_clusters, jittered, then rotated into R^d
    verts = np.eye(n_clusters) - 1.0 / n_clusters
    verts += rng.normal(0.0, 0.15, size=verts.shape) / math.sqrt(2.0)
    verts -= verts.mean(axis=0)
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    u, s, vt = np.linalg.svd(verts, full_matrices=False)
    coords = (u * s)[:, :min(d, n_clusters)]
    means = coords @ basis[:, :coords.shape[1]].T
    gaps = [np.linalg.norm(means[i] - means[j])
            for i in range(n_clusters) for j in range(i + 1, n_clusters)]
    return means * (separation / min(gaps))


def generate_synthetic_stream(d: int, n_attack_classes: int, per_class_train: int,
                              per_class_test: int, separation: float, seed: int,
                              attacks_per_task: int = 1, ordering=None,
                              bonafide_fraction: float = 0.5) -> TaskStream:
    """Isotropic unit-variance clusters: bona-fide (class 0) plus attacks 1..C.

    Class 1 is learned initially; classes 2..C arrive per ``attacks_per_task``.
    Every task batch also carries fresh bona-fide samples making up
    ``bonafide_fraction`` of the batch.
    """
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    if n_attack_classes < 2:
        raise ValueError(f"need at least 2 attack classes, got {n_attack_classes}")
    if per_class_train < 10 or per_class_test < 10:
        raise ValueError("per-class counts must be >= 10")
    if separation <= 0:
        raise ValueError(f"separation must be positive, got {separation}")
    if not 0 <= bonafide_fraction < 1:
        raise ValueError(f"bonafide_fraction must be in [0, 1), got {bonafide_fraction}")
    rng = np.random.default_rng(seed)
    means = _place_means(n_attack_classes + 1, d, separation, rng)
    schedule = build_protocol(range(n_attack_classes + 1), attacks_per_task, ordering)
    per_batch_bona = [
        _bonafide_share(per_class_train * len(cs), bonafide_fraction)
        for _, cs in sorted(schedule.items())]

    next_id = 0

    def draw(cls, count, split):
        nonlocal next_id
        pts = means[cls] + rng.normal(size=(count, d))
        out = tuple(FeatureSample(next_id + i, pts[i], cls, split) for i in range(count))
        next_id += count
        return out

    pools = {}
    test = []
    for cls in range(n_attack_classes + 1):
        pools[cls] = draw(cls, per_class_train, "train")
        test.extend(draw(cls, per_class_test, "test"))
    chunks = tuple(draw(BONAFIDE, n, "train") for n in per_batch_bona)
    initial = LabeledDataset.ground_truth(pools[BONAFIDE] + pools[1])
    attack_pool = {c: pools[c] for c in range(2, n_attack_classes + 1)}
    stream = TaskStream(initial, (), {}, tuple(test), (BONAFIDE, 1), attack_pool, chunks)
    return stream.with_schedule(schedule)


def _bonafide_share(n_attack, fraction):
    return int(round(n_attack * fraction / (1.0 - fraction)))


def assemble_stream(train: Sequence[FeatureSample], test: Sequence[FeatureSample],
                    attacks_per_task: int = 1, ordering=None,
                    bonafide_fraction: float = 0.5, seed: int = 0) -> TaskStream:
    """Build a task stream from an already-split sample collection.

    Bona-fide training samples are shuffled; the initial task gets the share
    that balances attack class 1 and the remainder is dealt to the task
    batches in proportion to each batch's attack count.
    """
    by_class = defaultdict(list)
    for s in train:
        by_class[s.true_class].append(s)
    if BONAFIDE not in by_class or 1 not in by_class:
        raise ValueError("training split needs bona-fide and attack class 1 samples")
    schedule = build_protocol(sorted(by_class), attacks_per_task, ordering)
    rng = np.random.default_rng(seed)
    bona = sorted(by_class[BONAFIDE], key=lambda s: s.id)
    bona = [bona[i] for i in rng.permutation(len(bona))]
    attack_counts = [sum(len(by_class[c]) for c in cs) for _, cs in sorted(schedule.items())]
    wanted = [_bonafide_share(n, bonafide_fraction) for n in attack_counts]
    n_initial = max(1, len(bona) - sum(wanted)) if sum(wanted) < len(bona) else max(
        1, len(bona) // (len(schedule) + 1))
    init_bona, rest = bona[:n_initial], bona[n_initial:]
    if sum(wanted) > len(rest):
        total = max(sum(wanted), 1)
        wanted = [len(rest) * w // total for w in wanted]
    chunks, pos = [], 0
    for w in wanted:
        chunks.append(tuple(sorted(rest[pos:pos + w], key=lambda s: s.id)))
        pos += w
    initial = LabeledDataset.ground_truth(
        sorted(init_bona + by_class[1], key=lambda s: s.id))
    attack_pool = {c: tuple(sorted(by_class[c], key=lambda s: s.id))
                   for c in by_class if c >= 2}
    stream = TaskStream(initial, (), {}, tuple(test), (BONAFIDE, 1), attack_pool, tuple(chunks))
    return stream.with_schedule(schedule)


def _format_float(v: float) -> str:
    return repr(float(v))


def save_feature_table(samples: Sequence[FeatureSample], path) -> None:
    """Write ``id,true_class,split,f0..f{d-1}`` rows (floats round-trip exactly)."""
    samples = list(samples)
    d = samples[0].features.size if samples else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "true_class", "split"] + [f"f{i}" for i in range(d)])
        for s in samples:
            writer.writerow([s.id, s.true_class, s.split] + [_format_float(v) for v in s.features])


def load_feature_table(path) -> list[FeatureSample]:
    """Parse a feature table; an optional ``group`` column may follow ``split``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"feature table not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FeatureTableError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        has_group = len(header) > 3 and header[3] == "group"
        lead = 4 if has_group else 3
        if header[:3] != ["id", "true_class", "split"] or len(header) <= lead:
            raise FeatureTableError(
                f"{path}: header must start with id,true_class,split then feature columns")
        width = len(header)
        out = []
        for row_index, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != width:
                raise ColumnCountError(
                    f"{path}: data row {row_index} has {len(row)} columns, header has {width}")
            split = row[2].strip()
            if split not in SPLITS:
                raise UnknownSplitError(f"{path}: data row {row_index} has unknown split {split!r}")
            try:
                feats = np.array([float(c) for c in row[lead:]])
                sample_id, cls = int(row[0]), int(row[1])
            except ValueError as exc:
                raise NonNumericCellError(f"{path}: data row {row_index}: {exc}") from None
            group = row[3].strip() if has_group else None
            out.append(FeatureSample(sample_id, feats, cls, split, group))
    return out
