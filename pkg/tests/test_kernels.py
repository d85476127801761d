"""The compiled kernels and the numpy fallback must agree."""

import os

import numpy as np
import pytest

from nacl_pad import _fallback, _backend

compiled = pytest.importorskip("nacl_pad._kernels")


def _problem(seed, sizes=(6, 9, 5, 3), n=40):
    rng = np.random.default_rng(seed)
    sizes = np.array(sizes, dtype=np.int64)
    n_par = int(sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])))
    params = rng.normal(0, 0.4, size=n_par)
    X = rng.normal(size=(n, sizes[0]))
    y = rng.integers(0, sizes[-1], size=n).astype(np.int64)
    anchors = np.abs(rng.normal(size=(n, sizes[-2])))
    anchored = (rng.random(n) < 0.4).astype(np.uint8)
    return params, sizes, X, y, anchors, anchored


def test_backend_selection():
    forced = os.environ.get("NACL_PAD_PURE_PYTHON", "") not in ("", "0")
    expected = "python" if forced else "compiled"
    assert _backend.BACKEND == expected


@pytest.mark.parametrize("sizes", [(6, 9, 5, 3), (6, 3), (6, 4, 4, 4, 2)])
@pytest.mark.parametrize("lam", [0.0, 0.7])
def test_loss_and_grad_agree(sizes, lam):
    params, sizes, X, y, anchors, anchored = _problem(1, sizes)
    if len(sizes) == 2:
        lam = 0.0
        anchors = np.zeros((X.shape[0], 1))
    g1 = np.zeros_like(params)
    g2 = np.zeros_like(params)
    l1 = compiled.loss_and_grad(params, sizes, X, y, anchors, anchored, lam, g1)
    l2 = _fallback.loss_and_grad(params, sizes, X, y, anchors, anchored, lam, g2)
    assert l1 == pytest.approx(l2, rel=1e-12)
    np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-13)


def test_train_steps_agree():
    params, sizes, X, y, anchors, anchored = _problem(2)
    rng = np.random.default_rng(0)
    batches = rng.integers(0, X.shape[0], size=(200, 16)).astype(np.int64)
    runs = []
    for mod in (compiled, _fallback):
        p = params.copy()
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        losses = np.zeros(len(batches))
        mod.train_steps(p, sizes, X, y, anchors, anchored, batches, 0.5, 1e-2, 1e-3,
                        0.9, 0.999, 1e-7, m, v, 0, losses)
        runs.append((p, losses))
    np.testing.assert_allclose(runs[0][0], runs[1][0], rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(runs[0][1], runs[1][1], rtol=1e-8)
    assert runs[0][1][-20:].mean() < runs[0][1][:20].mean()
