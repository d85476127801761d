"""Pure-numpy twin of the compiled kernels in ``_kernels.pyx``.

Same signatures, same in-place semantics. Used when the extension is not
built, and as the reference the compiled path is checked against.
"""

from __future__ import annotations

import numpy as np


def _layout(sizes):
    offsets = []
    off = 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = off
        off += n_in * n_out
        offsets.append((w, off, n_in, n_out))
        off += n_out
    return offsets


def _loss_grad(params, sizes, xb, labels, anchors, anchored, lam, grad):
    layout = _layout(sizes)
    n_layers = len(layout)
    batch = xb.shape[0]
    acts = [xb]
    for idx, (w, b, n_in, n_out) in enumerate(layout):
        out = acts[-1] @ params[w:b].reshape(n_in, n_out) + params[b:b + n_out]
        if idx < n_layers - 1:
            out = np.maximum(out, 0.0)
        acts.append(out)

    logits = acts[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    total = expd.sum(axis=1, keepdims=True)
    rows = np.arange(batch)
    loss = float(-(shifted[rows, labels] - np.log(total[:, 0])).sum() / batch)
    delta = expd / total / batch
    delta[rows, labels] -= 1.0 / batch

    for idx in range(n_layers - 1, -1, -1):
        w, b, n_in, n_out = layout[idx]
        grad[w:b] = (acts[idx].T @ delta).ravel()
        grad[b:b + n_out] = delta.sum(axis=0)
        if idx == 0:
            break
        back = delta @ params[w:b].reshape(n_in, n_out).T
        if idx == n_layers - 1 and lam > 0.0 and anchored.any():
            scale = lam / anchored.sum()
            diff = (acts[idx] - anchors) * anchored[:, None]
            loss += float(scale * (diff * diff).sum())
            back += 2.0 * scale * diff
        back[acts[idx] <= 0.0] = 0.0
        delta = back
    return loss


def loss_and_grad(params, sizes, X, y, anchors, anchored, lam, grad):
    """Objective and its gradient over all rows of ``X`` (one batch)."""
    return _loss_grad(params, sizes, X, y, anchors, anchored.astype(bool), lam, grad)


def train_steps(params, sizes, X, y, anchors, anchored, batches, lam, lr, decay,
                beta1, beta2, eps, m, v, step0, losses):
    """Adam over the precomputed index batches, updating ``params`` in place."""
    grad = np.zeros_like(params)
    mask = anchored.astype(bool)
    for s, rows in enumerate(batches):
        losses[s] = _loss_grad(params, sizes, X[rows], y[rows], anchors[rows],
                               mask[rows], lam, grad)
        t = step0 + s
        lr_t = lr / (1.0 + decay * t)
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        params -= lr_t * (m / (1.0 - beta1 ** (t + 1))) / (
            np.sqrt(v / (1.0 - beta2 ** (t + 1))) + eps)
