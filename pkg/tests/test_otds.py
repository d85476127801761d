import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nacl_pad import gmm as gmm_mod
from nacl_pad.gmm import GmmModel, fit_map, membership
from nacl_pad.otds import EmptyNegativesError, NEGATIVE_CLASS, build_pseudo_dataset, sample_shell


def _model(k=2, mu1=5.0, cov1=None):
    eye = np.eye(k)
    cov1 = eye if cov1 is None else np.asarray(cov1, float)
    L1 = np.linalg.cholesky(cov1)
    return GmmModel(np.array([0.5, 0.5]), np.stack([np.zeros(k), np.full(k, mu1)]),
                    np.stack([eye, cov1]), np.stack([eye, L1]), np.zeros(2))


def _blobs(seed=0, k=4, n=300):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(k, k)) / 2
    Z = np.vstack([rng.normal(size=(n, k)), rng.normal(3, 1, size=(n, k)) @ A + 6])
    y = np.repeat([0, 1], n)
    return Z, y


def test_forced_draw_lands_on_shell():
    model = _model()
    out = sample_shell(model, 0, 1, u=[1.0, 0.0])
    np.testing.assert_allclose(out, [[2.0, 0.0]])
    # membership exp(-4/2) is above 0.05, so this point would be rejected
    assert membership(model, 0, out[0]) == pytest.approx(math.exp(-2.0))
    out = sample_shell(model, 1, 1, u=[0.0, 0.0])
    np.testing.assert_allclose(out, [model.means[1]])


def test_forced_draw_uses_cholesky():
    cov = np.array([[4.0, 1.0], [1.0, 2.0]])
    model = _model(cov1=cov)
    u = np.array([0.5, -1.0])
    expected = model.means[1] + 2 * np.linalg.cholesky(cov) @ u
    np.testing.assert_allclose(sample_shell(model, 1, 1, u=u)[0], expected, rtol=1e-14)


def test_shell_moments():
    rng = np.random.default_rng(3)
    cov = np.array([[2.0, 0.6, 0.0], [0.6, 1.0, 0.3], [0.0, 0.3, 0.5]])
    Z = rng.multivariate_normal([1.0, -1.0, 2.0], cov, size=5000)
    model = fit_map(np.vstack([Z, Z + 10]), np.repeat([0, 1], 5000))
    draws = sample_shell(model, 0, 100_000, rng_seed=0)
    assert np.abs(draws.mean(axis=0) - model.means[0]).max() < 0.05
    target = 4 * (model.covariances[0] + model.jitter[0] * np.eye(3))
    rel = np.abs(np.cov(draws, rowvar=False, bias=True) - target) / np.abs(target).max()
    assert rel.max() < 0.05


def test_survival_rate_matches_chi_square():
    # k=2, identity: kept iff exp(-2|u|^2) <= 0.05, i.e. |u|^2 >= ln(20)/2
    model = _model()
    draws = sample_shell(model, 0, 20_000, rng_seed=1)
    rate = np.mean(membership(model, 0, draws) <= 0.05)
    assert rate == pytest.approx(math.exp(-math.log(20) / 4), abs=0.01)
    assert abs(rate - 0.47) <= 0.05


def test_filter_soundness_and_packaging():
    Z, y = _blobs()
    model = fit_map(Z, y)
    data = build_pseudo_dataset(model, Z, y, m_per_component=50_000, tau=0.05, rng_seed=4)
    for j in (0, 1):
        negs = data.negatives[data.negative_source == j]
        assert len(negs) == data.kept[j]
        assert np.all(membership(model, j, negs) <= 0.05)
    assert data.drawn == (50_000, 50_000)
    assert data.X.shape == (len(Z) + sum(data.kept), 4)
    assert set(np.unique(data.y[len(Z):])) == {NEGATIVE_CLASS}
    np.testing.assert_array_equal(data.y[:len(Z)], y)


def test_default_count_follows_real_samples():
    Z, y = _blobs(n=120)
    y = y.copy()
    y[:20] = 1
    data = build_pseudo_dataset(fit_map(Z, y), Z, y)
    assert data.drawn == (100, 140)
    data = build_pseudo_dataset(fit_map(Z, y), Z, y, m_per_component=(7, 9))
    assert data.drawn == (7, 9)


def test_tau_one_keeps_everything():
    Z, y = _blobs(2)
    data = build_pseudo_dataset(fit_map(Z, y), Z, y, m_per_component=500, tau=1.0)
    assert data.kept == (500, 500)


def test_seeded_and_reproducible():
    Z, y = _blobs(5)
    model = fit_map(Z, y)
    a = build_pseudo_dataset(model, Z, y, rng_seed=9)
    b = build_pseudo_dataset(model, Z, y, rng_seed=9)
    c = build_pseudo_dataset(model, Z, y, rng_seed=10)
    np.testing.assert_array_equal(a.negatives, b.negatives)
    assert a.negatives.shape != c.negatives.shape or np.any(a.negatives != c.negatives)


def test_nothing_survives_raises():
    model = _model()
    Z = np.zeros((2, 2))
    with pytest.raises(EmptyNegativesError, match="component 0: 0 of 1 "):
        # with a single draw and a tiny tau survival is astronomically unlikely
        build_pseudo_dataset(model, Z, [0, 1], m_per_component=1, tau=1e-300, rng_seed=0)
    with pytest.raises(ValueError, match="tau"):
        build_pseudo_dataset(model, Z, [0, 1], tau=0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**20), tau=st.floats(0.001, 0.9))
def test_kept_never_exceed_tau(seed, tau):
    Z, y = _blobs(seed % 5, k=3, n=60)
    model = fit_map(Z, y)
    data = build_pseudo_dataset(model, Z, y, m_per_component=400, tau=tau, rng_seed=seed)
    for j in (0, 1):
        negs = data.negatives[data.negative_source == j]
        assert np.all(gmm_mod.membership(model, j, negs) <= tau)
        assert 0 < data.kept[j] <= data.drawn[j]
