import dataclasses

import numpy as np
import pytest

from nacl_pad import engine, mlp
from nacl_pad.dataset import FeatureSample, generate_synthetic_stream, stack
from nacl_pad.engine import EngineConfig, detect_novel, run_protocol
from nacl_pad.replay import BufferEntry

FAST = mlp.TrainConfig(num_batches=150, batch_size=30)


@pytest.fixture(scope="module")
def stream():
    return generate_synthetic_stream(6, 3, 40, 10, 8.0, seed=3)


def cfg(**kw):
    kw.setdefault("train", FAST)
    kw.setdefault("lam", 10.0)
    return EngineConfig(**kw)


@pytest.fixture(scope="module")
def nacl_run(stream):
    return run_protocol(stream, cfg(), seed=1)


def test_sub_seed_is_stable_and_distinct():
    assert engine.sub_seed(0, 1, 2) == engine.sub_seed(0, 1, 2)
    assert len({engine.sub_seed(s, t, k) for s in range(3) for t in range(3) for k in range(3)}) == 27


def test_config_validation():
    with pytest.raises(ValueError, match="unknown method 'nacll'"):
        EngineConfig(method="nacll")
    with pytest.raises(ValueError, match="tau"):
        EngineConfig(tau=0.0)
    with pytest.raises(ValueError, match="ordering"):
        EngineConfig(ordering="random")
    assert EngineConfig(method="dl").label_source == "ground_truth"
    assert EngineConfig(method="fr").strategy == "full"


def test_records_cover_every_task(stream, nacl_run):
    assert [r.task_index for r in nacl_run.records] == [1, 2]
    assert nacl_run.order == [2, 3]
    for r in nacl_run.records:
        assert r.acer == (r.apcer + r.bpcer) / 2
        assert 0 <= r.acer <= 1
        assert r.novel_detected is not None


def test_run_is_deterministic(stream, nacl_run):
    again = run_protocol(stream, cfg(), seed=1)
    assert again.records == nacl_run.records
    np.testing.assert_array_equal(again.model.params, nacl_run.model.params)


def test_mof_buffer_respects_budget(nacl_run):
    for label in (0, 1):
        assert sum(e.assigned_label == label for e in nacl_run.buffer.entries) <= 50


def test_st_curve_is_flat(stream):
    run = run_protocol(stream, cfg(method="st"), seed=0)
    first = run.records[0]
    for r in run.records:
        assert (r.apcer, r.bpcer, r.acer) == (first.apcer, first.bpcer, first.acer)
    model, _, _ = engine.initial_train(stream, cfg(method="st"), 0)
    np.testing.assert_array_equal(run.model.params, model.params)


def test_jt_sees_every_class(stream):
    run = run_protocol(stream, cfg(method="jt"), seed=0)
    assert len({(r.apcer, r.bpcer) for r in run.records}) == 1
    assert run.records[-1].acer <= 0.1


def test_dl_never_pollutes(stream):
    run = run_protocol(stream, cfg(method="dl"), seed=2)
    for r in run.records:
        assert r.pollution_buffer == 0.0 and r.pollution_used == 0.0
    assert not any(e.polluted for e in run.buffer.entries)


def test_full_replay_grows_by_novel_count(stream):
    runner = engine.ProtocolRunner(stream, cfg(method="fr"), seed=0)
    size = len(runner.buffer)
    assert size == len(stream.initial)
    for t in sorted(stream.attack_schedule):
        before = {e.sample.id for e in runner.buffer.entries}
        rec = runner.learn(stream.tasks[t - 1], t)
        assert len(runner.buffer) == size + rec.novel_detected
        assert before <= {e.sample.id for e in runner.buffer.entries}
        size = len(runner.buffer)


def test_no_replay_budget_runs(stream):
    run = run_protocol(stream, cfg(budget=0), seed=0)
    assert len(run.buffer) == 0
    assert len(run.records) == stream.n_tasks


def test_ng_runs(stream):
    run = run_protocol(stream, cfg(method="ng"), seed=0)
    assert len(run.records) == stream.n_tasks


def _ternary_biased(dim, towards):
    model = mlp.expand_to_ternary(mlp.init_model((dim, 4, 3, 2), 0), 0)
    model.bias(model.n_layers - 1)[:] = 0.0
    model.bias(model.n_layers - 1)[towards] = 1e6
    return model


def test_detect_novel_labels():
    batch = [FeatureSample(i, np.full(3, float(i)), i % 2) for i in range(6)]
    all_novel = _ternary_biased(3, 2)
    got = detect_novel(all_novel, batch)
    assert [e.sample.id for e in got] == list(range(6))
    assert all(e.assigned_label == 1 and e.label_source == "predicted" for e in got)
    truth = detect_novel(all_novel, batch, "ground_truth")
    assert [e.assigned_label for e in truth] == [0, 1, 0, 1, 0, 1]
    assert detect_novel(_ternary_biased(3, 1), batch) == []
    assert detect_novel(all_novel, []) == []
    with pytest.raises(mlp.ArchitectureError):
        detect_novel(mlp.init_model((3, 4, 2), 0), batch)


def _rows(seed, n_novel=5, n_buf=7, dim=4):
    rng = np.random.default_rng(seed)
    make = lambda i, lab: BufferEntry(FeatureSample(i, rng.normal(size=dim), 1 + lab), lab)
    novel = [make(i, 1) for i in range(n_novel)]
    buf = [make(100 + i, i % 2) for i in range(n_buf)]
    return novel, buf


@pytest.mark.parametrize("seed", range(5))
def test_rehearsal_objective_by_hand(seed):
    novel, buf = _rows(seed)
    model = mlp.init_model((4, 6, 5, 2), seed)
    snapshot = mlp.init_model((4, 6, 5, 2), seed + 50)
    lam = 0.7
    rows = novel + buf
    X = stack([e.sample for e in rows])
    y = np.array([e.assigned_label for e in rows])
    p = mlp.forward(model, X)
    ce = -np.mean(np.log(p[np.arange(len(y)), y]))
    Xb = stack([e.sample for e in buf])
    drift = np.mean(np.sum((mlp.embed(model, Xb) - mlp.embed(snapshot, Xb)) ** 2, axis=1))
    got = engine.pseudo_rehearsal_objective(model, snapshot, novel, buf, lam)
    assert got == pytest.approx(ce + lam * drift, rel=1e-12)
    assert engine.pseudo_rehearsal_objective(model, snapshot, novel, buf, 0.0) == pytest.approx(
        mlp.loss(model, X, y), rel=1e-12)
    assert engine.pseudo_rehearsal_objective(model, model, novel, buf, 5.0) == pytest.approx(
        ce, rel=1e-12)


def test_rehearsal_update_checks():
    novel, buf = _rows(0)
    model = mlp.init_model((4, 6, 5, 2), 0)
    with pytest.raises(ValueError):
        engine.pseudo_rehearsal_update(model, model, [], [], 1.0, FAST)
    with pytest.raises(mlp.ArchitectureError):
        engine.pseudo_rehearsal_update(mlp.expand_to_ternary(model, 0), model, novel, buf,
                                       1.0, FAST)
    out = engine.pseudo_rehearsal_update(model, model, novel, buf, 1.0,
                                         dataclasses.replace(FAST, num_batches=20))
    assert out.layer_sizes == model.layer_sizes


@pytest.mark.parametrize("direction", ["ed", "de"])
def test_difficulty_ordering_step_by_step(direction):
    stream = generate_synthetic_stream(6, 4, 40, 10, 6.0, seed=5)
    run = run_protocol(stream, cfg(ordering=direction), seed=0, keep_trace=True)
    assert sorted(run.order) == sorted(stream.attack_pool)
    assert [step["chosen"][0] for step in run.trace] == run.order
    for step in run.trace:
        # recompute every remaining class's detection rate from the recorded model
        rates = {}
        for c in step["rates"]:
            logits = mlp.logits(step["model"], stack(stream.attack_pool[c]))
            rates[c] = float(np.mean(logits[:, 1] > logits[:, 0]))
        assert rates == pytest.approx(step["rates"])
        best = max(rates.values()) if direction == "ed" else min(rates.values())
        expected = min(c for c, r in rates.items() if r == best)
        assert step["chosen"] == [expected]


def test_pick_tie_break():
    rates = {5: 0.5, 3: 0.5, 4: 0.1}
    assert engine._pick(rates, 1, "ed") == [3]
    assert engine._pick(rates, 1, "de") == [4]
    assert engine._pick({2: 0.0, 3: 0.0}, 2, "de") == [2, 3]


def test_snapshots_written(stream, tmp_path):
    run_protocol(stream, cfg(method="rs"), seed=0, snapshot_dir=tmp_path)
    out = tmp_path / "rs_seed0_t001"
    assert (out / "model.bin").is_file() and (out / "gmm.npz").is_file()
    assert (out / "buffer.csv").read_text().startswith("sample_id,")
