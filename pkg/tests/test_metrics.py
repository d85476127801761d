import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nacl_pad.engine import StepRecord
from nacl_pad.metrics import (EvalOutcome, acer, aggregate_curves, apcer, bpcer, mean_metric)


def test_spot_cases():
    o = EvalOutcome(n_attack=10, n_bonafide=20, attack_as_bonafide=3, bonafide_as_attack=5)
    assert apcer(o) == 0.3
    assert bpcer(o) == 0.25
    assert acer(o) == 0.275
    perfect = EvalOutcome(4, 4, 0, 0)
    assert acer(perfect) == 0.0
    worst = EvalOutcome(4, 4, 4, 4)
    assert acer(worst) == 1.0


def test_from_predictions():
    truth = [True, True, False, False, False]
    pred = [True, False, True, False, False]
    o = EvalOutcome.from_predictions(truth, pred)
    assert (o.n_attack, o.n_bonafide, o.attack_as_bonafide, o.bonafide_as_attack) == (2, 3, 1, 1)
    assert apcer(o) == 0.5 and bpcer(o) == pytest.approx(1 / 3)


def test_empty_class_is_undefined():
    with pytest.raises(ZeroDivisionError, match="APCER"):
        apcer(EvalOutcome(0, 3, 0, 0))
    with pytest.raises(ZeroDivisionError, match="BPCER"):
        bpcer(EvalOutcome(3, 0, 0, 0))
    with pytest.raises(ValueError):
        EvalOutcome(2, 2, 3, 0)


def test_acer_identity_on_random_outcomes():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        na, nb = rng.integers(1, 500, size=2)
        o = EvalOutcome(int(na), int(nb), int(rng.integers(0, na + 1)), int(rng.integers(0, nb + 1)))
        assert acer(o) == (apcer(o) + bpcer(o)) / 2
        assert 0.0 <= acer(o) <= 1.0


@given(na=st.integers(1, 10_000), nb=st.integers(1, 10_000), data=st.data())
def test_rates_bounded(na, nb, data):
    fa = data.draw(st.integers(0, na))
    fb = data.draw(st.integers(0, nb))
    o = EvalOutcome(na, nb, fa, fb)
    assert 0 <= apcer(o) <= 1 and 0 <= bpcer(o) <= 1


def _rec(method, seed, t, a, b, pol=None):
    return StepRecord(t, method, seed, a, b, (a + b) / 2, pollution_buffer=pol)


def test_aggregate_matches_hand_mean_and_std():
    rng = np.random.default_rng(1)
    vals = rng.random((3, 4, 2))  # seeds x tasks x (apcer, bpcer)
    recs = [_rec("nacl", s, t + 1, *vals[s, t], pol=0.1 * s) for s in range(3) for t in range(4)]
    recs += [_rec("st", s, t + 1, 0.5, 0.5) for s in range(2) for t in range(4)]
    rows = aggregate_curves(reversed(recs))
    assert [(r["method"], r["task_index"]) for r in rows][:5] == [
        ("nacl", 1), ("nacl", 2), ("nacl", 3), ("nacl", 4), ("st", 1)]
    for t in range(4):
        row = rows[t]
        col = vals[:, t, 0]
        assert row["n_seeds"] == 3
        assert row["apcer_mean"] == pytest.approx(sum(col) / 3, rel=1e-12)
        assert row["apcer_std"] == pytest.approx(
            np.sqrt(sum((c - sum(col) / 3) ** 2 for c in col) / 3), rel=1e-12)
        assert row["pollution_buffer_mean"] == pytest.approx(0.1)
    assert rows[4]["pollution_buffer_mean"] is None
    assert rows[4]["acer_std"] == 0.0


def test_ragged_seeds_rejected():
    recs = [_rec("rs", 0, t, 0.1, 0.1) for t in (1, 2, 3)] + [_rec("rs", 4, t, 0.1, 0.1)
                                                              for t in (1, 2)]
    with pytest.raises(ValueError, match="seed 4"):
        aggregate_curves(recs)


def test_mean_metric_defaults_to_last_step():
    recs = [_rec("nacl", s, t, 0.1 * t, 0.0) for s in range(2) for t in (1, 2, 3)]
    assert mean_metric(recs, "apcer") == pytest.approx(0.3)
    assert mean_metric(recs, "acer", task_index=1) == pytest.approx(0.05)
