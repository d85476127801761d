"""Continual novel-attack detection loop and its baselines.

One :class:`ProtocolRunner` owns a model, GMM, replay buffer and seed. Each
time step expands the binary model with an out-of-distribution output,
detects novel samples in the unlabeled batch, retrains from fresh weights on
novel + replayed samples with an embedding-drift penalty, refits the GMM and
refills the buffer, then evaluates on the fixed test split.

Method tags:
    nacl  mean-of-features buffer, predicted labels
    rs    random buffer, predicted labels
    fr    unbounded buffer, predicted labels
    frr   unbounded buffer, ground-truth labels for detected samples
    dl    mean-of-features buffer, ground-truth labels for detected samples
    ng    no GMM / ternary head; every predicted attack is treated as novel
    st    initial model only
    jt    single model trained on all labeled training data
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from nacl_pad import gmm as gmm_mod
from nacl_pad import mlp
from nacl_pad.dataset import FeatureSample, TaskStream, binary_labels, stack
from nacl_pad.metrics import EvalOutcome, apcer, bpcer
from nacl_pad.otds import NEGATIVE_CLASS, build_pseudo_dataset
from nacl_pad.replay import BufferEntry, ReplayBuffer, dump_buffer, pollution_rate

logger = logging.getLogger(__name__)

METHODS = ("nacl", "st", "jt", "fr", "rs", "ng", "frr", "dl")
ORDERINGS = ("index", "ed", "de")
_STRATEGY = {"nacl": "mof", "dl": "mof", "rs": "random", "fr": "full", "frr": "full",
             "ng": "full", "st": "mof", "jt": "mof"}
_TRUE_LABELS = ("dl", "frr")


@dataclass(frozen=True)
class EngineConfig:
    lam: float = 300.0
    tau: float = 0.05
    membership_mode: str = "density_ratio"
    m_per_component: int | None = None
    budget: int = 50
    train: mlp.TrainConfig = field(default_factory=mlp.TrainConfig)
    method: str = "nacl"
    ordering: str = "index"
    seeds: int = 10
    jitter: float = 1e-6
    hidden: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.membership_mode not in gmm_mod.MODES:
            raise ValueError(f"unknown membership mode {self.membership_mode!r}; "
                             f"expected one of {gmm_mod.MODES}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r}; expected one of {ORDERINGS}")
        if self.budget < 0:
            raise ValueError(f"budget must be >= 0, got {self.budget}")
        if self.seeds < 1:
            raise ValueError(f"seeds must be >= 1, got {self.seeds}")

    @property
    def strategy(self) -> str:
        return _STRATEGY[self.method]

    @property
    def label_source(self) -> str:
        return "ground_truth" if self.method in _TRUE_LABELS else "predicted"


@dataclass(frozen=True)
class StepRecord:
    task_index: int
    method: str
    seed: int
    apcer: float
    bpcer: float
    acer: float
    pollution_buffer: float | None = None
    pollution_used: float | None = None
    novel_detected: int | None = None
    buffer_only: bool = False


@dataclass
class ProtocolRun:
    method: str
    seed: int
    records: list[StepRecord]
    order: list[int]
    model: mlp.MlpModel
    buffer: ReplayBuffer | None = None
    trace: list[dict] = field(default_factory=list)


def sub_seed(seed: int, *keys: int) -> int:
    """Independent integer seed derived from ``seed`` and a key path."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def _cfg(config: EngineConfig, seed: int) -> mlp.TrainConfig:
    return dataclasses.replace(config.train, seed=seed)


def evaluate(model: mlp.MlpModel, samples: Sequence[FeatureSample]) -> EvalOutcome:
    pred = mlp.predict(model, stack(samples)) == 1
    return EvalOutcome.from_predictions([s.is_attack for s in samples], pred)


def detection_rate(model: mlp.MlpModel, samples: Sequence[FeatureSample]) -> float:
    """Fraction of ``samples`` the binary model calls attack."""
    if not samples:
        return 0.0
    return float(np.mean(mlp.predict(model, stack(samples)) == 1))


def _record(model, test_set, t, method, seed, **extra) -> StepRecord:
    o = evaluate(model, test_set)
    a, b = apcer(o), bpcer(o)
    return StepRecord(t, method, seed, a, b, (a + b) / 2, **extra)


def _entries(samples, labels, source):
    return [BufferEntry(s, int(lab), source) for s, lab in zip(samples, labels)]


def _xy(entries):
    return stack([e.sample for e in entries]), np.array([e.assigned_label for e in entries],
                                                        dtype=np.int64)


def initial_train(stream: TaskStream, config: EngineConfig, seed: int):
    """Binary model on the initial data, its GMM, and the first buffer fill."""
    data = stream.initial
    labels = data.y
    if set(labels.tolist()) != {0, 1}:
        raise ValueError("initial dataset must contain both bona-fide and attack samples")
    sizes = (stream.dimension, *config.hidden, 2)
    model = mlp.init_model(sizes, sub_seed(seed, 0, 0))
    model = mlp.train(model, data.X, labels, _cfg(config, sub_seed(seed, 0, 1)))
    fitted = gmm_mod.fit_map(mlp.embed(model, data.X), labels, config.jitter)
    entries = _entries(data.samples, labels, "ground_truth")
    budget = None if config.strategy == "full" else config.budget
    buffer = ReplayBuffer((), budget, config.strategy).refill(
        entries, fitted, model, sub_seed(seed, 0, 2))
    return model, fitted, buffer


def detect_novel(model: mlp.MlpModel, batch: Sequence[FeatureSample],
                 label_source: str = "predicted") -> list[BufferEntry]:
    """Samples whose argmax over the ternary outputs is the OOD class.

    Detected samples are labeled attack, or with their ground truth when
    ``label_source`` is ``"ground_truth"``.
    """
    if model.output_arity != 3:
        raise mlp.ArchitectureError(
            f"novelty detection needs a ternary model, got {model.output_arity} outputs")
    if not batch:
        return []
    hits = mlp.predict(model, stack(batch)) == NEGATIVE_CLASS
    picked = [s for s, h in zip(batch, hits) if h]
    if label_source == "ground_truth":
        return [BufferEntry(s, int(s.is_attack), "ground_truth") for s in picked]
    return [BufferEntry(s, 1, "predicted") for s in picked]


def _rehearsal_arrays(snapshot, novel, buffer):
    rows = list(novel) + list(buffer)
    X, y = _xy(rows)
    anchored = np.zeros(len(rows), dtype=np.uint8)
    anchored[len(novel):] = 1
    anchors = np.zeros((len(rows), snapshot.embedding_width))
    if len(buffer):
        anchors[len(novel):] = mlp.embed(snapshot, X[len(novel):])
    return X, y, anchors, anchored


def pseudo_rehearsal_objective(model, snapshot, novel, buffer, lam: float) -> float:
    """Batch objective: mean cross-entropy over novel + buffer rows plus
    ``lam`` times the mean squared embedding drift of the buffer rows."""
    X, y, anchors, anchored = _rehearsal_arrays(snapshot, novel, buffer)
    return mlp.loss(model, X, y, anchors, anchored, lam)


def pseudo_rehearsal_update(model: mlp.MlpModel, snapshot_encoder: mlp.MlpModel,
                            novel: Sequence[BufferEntry], buffer: Sequence[BufferEntry],
                            lam: float, train_config: mlp.TrainConfig) -> mlp.MlpModel:
    """Adam on class-balanced batches drawn from novel and buffer entries."""
    if not novel and not buffer:
        raise ValueError("pseudo-rehearsal needs novel or buffered samples")
    if model.output_arity != 2:
        raise mlp.ArchitectureError("pseudo-rehearsal updates a binary model")
    X, y, anchors, anchored = _rehearsal_arrays(snapshot_encoder, novel, buffer)
    return mlp.fit(model, X, y, train_config, anchors, anchored, lam)


class ProtocolRunner:
    """Sequential state of one (method, seed) run."""

    def __init__(self, stream: TaskStream, config: EngineConfig, seed: int,
                 snapshot_dir=None):
        self.stream = stream
        self.config = config
        self.seed = seed
        self.snapshot_dir = Path(snapshot_dir) if snapshot_dir else None
        self.model, self.gmm, self.buffer = initial_train(stream, config, seed)
        self.train_set = _entries(stream.initial.samples, stream.initial.y, "ground_truth")
        self.initial_model = self.model

    def expand(self, t: int) -> mlp.MlpModel:
        """Ternary model whose head was retrained on shell negatives + real embeddings."""
        cfg = self.config
        X, y = _xy(self.train_set)
        pseudo = build_pseudo_dataset(self.gmm, mlp.embed(self.model, X), y,
                                      cfg.m_per_component, cfg.tau, cfg.membership_mode,
                                      sub_seed(self.seed, t, 1))
        ternary = mlp.expand_to_ternary(self.model, sub_seed(self.seed, t, 2))
        return mlp.train(ternary, pseudo.X, pseudo.y, _cfg(cfg, sub_seed(self.seed, t, 3)),
                         space="embedding")

    def learn(self, batch: Sequence[FeatureSample], t: int) -> StepRecord:
        cfg = self.config
        method = cfg.method
        snapshot = self.model
        if method == "ng":
            hits = mlp.predict(snapshot, stack(batch)) == 1
            novel = [BufferEntry(s, 1, "predicted") for s, h in zip(batch, hits) if h]
        else:
            novel = detect_novel(self.expand(t), batch, cfg.label_source)
        novel_ids = {e.sample.id for e in novel}
        fresh_rows = list(novel)
        if not self.buffer.entries and cfg.strategy != "full":
            # no replay memory: the current batch stands in, non-novel samples
            # labeled by the pre-update binary model
            rest = [s for s in batch if s.id not in novel_ids]
            if rest:
                fresh_rows += _entries(rest, mlp.predict(snapshot, stack(rest)), "predicted")
        replay_rows = [e for e in self.buffer.entries if e.sample.id not in novel_ids]
        used = fresh_rows + replay_rows
        buffer_only = not novel
        if buffer_only:
            logger.warning("%s seed %d step %d: no novel samples detected; buffer-only update",
                           method, self.seed, t)
        labels = {e.assigned_label for e in used}
        if labels == {0, 1}:
            fresh = mlp.reinitialize(snapshot, sub_seed(self.seed, t, 4))
            self.model = pseudo_rehearsal_update(fresh, snapshot, fresh_rows, replay_rows,
                                                 cfg.lam, _cfg(cfg, sub_seed(self.seed, t, 5)))
        else:
            logger.warning("%s seed %d step %d: training pool lacks a class; model kept",
                           method, self.seed, t)
        if method != "ng" and labels == {0, 1}:
            X, y = _xy(used)
            self.gmm = gmm_mod.fit_map(mlp.embed(self.model, X), y, cfg.jitter)
            self.train_set = used
        candidates = list(self.buffer.entries) + novel
        self.buffer = self.buffer.refill(candidates, self.gmm, self.model,
                                         sub_seed(self.seed, t, 6))
        record = _record(self.model, self.stream.test_set, t, method, self.seed,
                         pollution_buffer=pollution_rate(self.buffer),
                         pollution_used=pollution_rate(used),
                         novel_detected=len(novel), buffer_only=buffer_only)
        self._snapshot(t)
        return record

    def _snapshot(self, t):
        if self.snapshot_dir is None:
            return
        out = self.snapshot_dir / f"{self.config.method}_seed{self.seed}_t{t:03d}"
        out.mkdir(parents=True, exist_ok=True)
        mlp.save(self.model, out / "model.bin")
        np.savez(out / "gmm.npz", **gmm_mod.to_arrays(self.gmm))
        dump_buffer(self.buffer, out / "buffer.csv")


def _pick(rates: dict[int, float], count: int, direction: str) -> list[int]:
    sign = -1.0 if direction == "ed" else 1.0
    ranked = sorted(rates, key=lambda c: (sign * rates[c], c))
    return ranked[:count]


def difficulty_ordering(stream: TaskStream, runner: ProtocolRunner, direction: str,
                        trace: list | None = None):
    """Learn the remaining attack classes easiest-first (``ed``) or hardest-first (``de``).

    Before each step the detection rate of every remaining class (share of its
    training samples the current binary model calls attack) is measured and
    the max (ed) or min (de) is learned next; ties go to the lower class id.
    Returns the realized order and the step records.
    """
    if direction not in ("ed", "de"):
        raise ValueError(f"direction must be 'ed' or 'de', got {direction!r}")
    remaining = sorted(stream.attack_pool)
    sizes = [len(stream.attack_schedule[t]) for t in sorted(stream.attack_schedule)]
    order, records = [], []
    for t, size in enumerate(sizes, start=1):
        rates = {c: detection_rate(runner.model, stream.attack_pool[c]) for c in remaining}
        chosen = _pick(rates, size, direction)
        if trace is not None:
            trace.append({"task_index": t, "rates": rates, "chosen": chosen,
                          "model": runner.model})
        records.append(runner.learn(stream.batch_for(t, chosen), t))
        order.extend(chosen)
        remaining = [c for c in remaining if c not in chosen]
    return order, records


def _flat(stream, model, config, seed):
    return [_record(model, stream.test_set, t, config.method, seed)
            for t in range(1, stream.n_tasks + 1)]


def joint_train(stream: TaskStream, config: EngineConfig, seed: int) -> mlp.MlpModel:
    samples = list(stream.initial.samples) + [s for b in stream.tasks for s in b]
    samples = list({s.id: s for s in samples}.values())
    sizes = (stream.dimension, *config.hidden, 2)
    model = mlp.init_model(sizes, sub_seed(seed, 0, 0))
    return mlp.train(model, stack(samples), binary_labels(samples),
                     _cfg(config, sub_seed(seed, 0, 1)))


def run_protocol(stream: TaskStream, config: EngineConfig, seed: int = 0,
                 snapshot_dir=None, keep_trace: bool = False) -> ProtocolRun:
    """Run one method for one seed over every task of ``stream``."""
    method = config.method
    if method == "jt":
        model = joint_train(stream, config, seed)
        return ProtocolRun(method, seed, _flat(stream, model, config, seed), [], model)
    runner = ProtocolRunner(stream, config, seed, snapshot_dir)
    if method == "st":
        order = [c for t in sorted(stream.attack_schedule) for c in stream.attack_schedule[t]]
        return ProtocolRun(method, seed, _flat(stream, runner.model, config, seed), order,
                           runner.model, runner.buffer)
    trace = [] if keep_trace else None
    if config.ordering == "index":
        order, records = [], []
        for t in sorted(stream.attack_schedule):
            records.append(runner.learn(stream.tasks[t - 1], t))
            order.extend(stream.attack_schedule[t])
    else:
        order, records = difficulty_ordering(stream, runner, config.ordering, trace)
    return ProtocolRun(method, seed, records, order, runner.model, runner.buffer, trace or [])
