# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernels for the flat-parameter MLP.

Mirrors :mod:`nacl_pad._fallback` exactly in semantics. Parameters live in a
single float64 vector: for each layer ``l`` the row-major weight block
``(sizes[l], sizes[l + 1])`` followed by the bias ``(sizes[l + 1],)``.
Hidden layers use ReLU, the output layer softmax. The optional drift penalty
acts on the last hidden activation (the embedding).
"""

import numpy as np

from libc.math cimport exp, log, sqrt
from scipy.linalg.cython_blas cimport dgemm


cdef inline void _gemm_rm(char ta, char tb, int m, int n, int k, double alpha,
                          double* a, int lda, double* b, int ldb, double beta,
                          double* c, int ldc) noexcept nogil:
    # row-major C = alpha * op(A) @ op(B) + beta * C via column-major dgemm
    dgemm(&tb, &ta, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


cdef class _Workspace:
    cdef public object acts, delta_a, delta_b, woff, boff, aoff
    cdef public int n_layers, max_width, batch

    def __init__(self, long[::1] sizes, int batch):
        cdef int l, total = 0
        self.n_layers = sizes.shape[0] - 1
        self.batch = batch
        self.woff = np.zeros(self.n_layers, dtype=np.int64)
        self.boff = np.zeros(self.n_layers, dtype=np.int64)
        self.aoff = np.zeros(self.n_layers + 1, dtype=np.int64)
        off = 0
        for l in range(self.n_layers):
            self.woff[l] = off
            off += sizes[l] * sizes[l + 1]
            self.boff[l] = off
            off += sizes[l + 1]
        self.max_width = 0
        for l in range(self.n_layers + 1):
            self.aoff[l] = total
            total += batch * sizes[l]
            if sizes[l] > self.max_width:
                self.max_width = sizes[l]
        self.acts = np.zeros(total, dtype=np.float64)
        self.delta_a = np.zeros(batch * self.max_width, dtype=np.float64)
        self.delta_b = np.zeros(batch * self.max_width, dtype=np.float64)


cdef double _loss_grad(double[::1] params, long[::1] sizes, _Workspace ws,
                       long[::1] labels, double[:, ::1] anchors,
                       unsigned char[::1] anchored, long[::1] rows,
                       double lam, double[::1] grad):
    """Forward + backward on the batch already gathered into ``acts[0]``.

    ``rows`` indexes ``anchors``/``anchored`` for each batch row.
    """
    cdef int L = ws.n_layers
    cdef int B = ws.batch
    cdef long[::1] woff = ws.woff
    cdef long[::1] boff = ws.boff
    cdef long[::1] aoff = ws.aoff
    cdef double[::1] acts = ws.acts
    cdef double[::1] da = ws.delta_a
    cdef double[::1] db = ws.delta_b
    cdef double* P = &params[0]
    cdef double* G = &grad[0]
    cdef double* A = &acts[0]
    cdef double* cur
    cdef double* nxt
    cdef double* tmp
    cdef int l, i, j, n_in, n_out, k, y, na
    cdef double mx, s, loss = 0.0, reg = 0.0, diff, scale
    cdef double* out
    cdef double* bias

    # forward
    for l in range(L):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        out = A + aoff[l + 1]
        _gemm_rm(b'N', b'N', B, n_out, n_in, 1.0, A + aoff[l], n_in,
                 P + woff[l], n_out, 0.0, out, n_out)
        bias = P + boff[l]
        if l < L - 1:
            for i in range(B):
                for j in range(n_out):
                    s = out[i * n_out + j] + bias[j]
                    out[i * n_out + j] = s if s > 0.0 else 0.0
        else:
            for i in range(B):
                for j in range(n_out):
                    out[i * n_out + j] += bias[j]

    # softmax cross-entropy; delta of the logits into da
    n_out = sizes[L]
    out = A + aoff[L]
    cur = &da[0]
    nxt = &db[0]
    for i in range(B):
        mx = out[i * n_out]
        for j in range(1, n_out):
            if out[i * n_out + j] > mx:
                mx = out[i * n_out + j]
        s = 0.0
        for j in range(n_out):
            cur[i * n_out + j] = exp(out[i * n_out + j] - mx)
            s += cur[i * n_out + j]
        y = labels[i]
        loss += -(out[i * n_out + y] - mx - log(s))
        for j in range(n_out):
            cur[i * n_out + j] = cur[i * n_out + j] / s / B
        cur[i * n_out + y] -= 1.0 / B
    loss /= B

    # backward
    for l in range(L - 1, -1, -1):
        n_in = sizes[l]
        n_out = sizes[l + 1]
        _gemm_rm(b'T', b'N', n_in, n_out, B, 1.0, A + aoff[l], n_in,
                 cur, n_out, 0.0, G + woff[l], n_out)
        bias = G + boff[l]
        for j in range(n_out):
            bias[j] = 0.0
        for i in range(B):
            for j in range(n_out):
                bias[j] += cur[i * n_out + j]
        if l == 0:
            break
        _gemm_rm(b'N', b'T', B, n_in, n_out, 1.0, cur, n_out,
                 P + woff[l], n_out, 0.0, nxt, n_in)
        out = A + aoff[l]
        if l == L - 1 and lam > 0.0:
            na = 0
            for i in range(B):
                if anchored[rows[i]]:
                    na += 1
            if na > 0:
                scale = lam / na
                for i in range(B):
                    if anchored[rows[i]]:
                        for j in range(n_in):
                            diff = out[i * n_in + j] - anchors[rows[i], j]
                            reg += diff * diff
                            nxt[i * n_in + j] += 2.0 * scale * diff
                loss += scale * reg
        for i in range(B * n_in):
            if out[i] <= 0.0:
                nxt[i] = 0.0
        tmp = cur
        cur = nxt
        nxt = tmp
    return loss


def loss_and_grad(double[::1] params, long[::1] sizes, double[:, ::1] X,
                  long[::1] y, double[:, ::1] anchors,
                  unsigned char[::1] anchored, double lam, double[::1] grad):
    """Objective and its gradient over all rows of ``X`` (one batch)."""
    cdef int n = X.shape[0], d = X.shape[1], i, j
    ws = _Workspace(sizes, n)
    cdef double[::1] acts = ws.acts
    rows = np.arange(n, dtype=np.int64)
    for i in range(n):
        for j in range(d):
            acts[i * d + j] = X[i, j]
    return _loss_grad(params, sizes, ws, y, anchors, anchored, rows, lam, grad)


def train_steps(double[::1] params, long[::1] sizes, double[:, ::1] X,
                long[::1] y, double[:, ::1] anchors, unsigned char[::1] anchored,
                long[:, ::1] batches, double lam, double lr, double decay,
                double beta1, double beta2, double eps, double[::1] m,
                double[::1] v, long step0, double[::1] losses):
    """Adam over the precomputed index batches, updating ``params`` in place."""
    cdef int n_steps = batches.shape[0], B = batches.shape[1]
    cdef int d = X.shape[1], n_par = params.shape[0]
    cdef int s, i, j, p
    cdef long t, r
    cdef double lr_t, c1, c2, g
    ws = _Workspace(sizes, B)
    cdef double[::1] acts = ws.acts
    cdef long[::1] labels = np.zeros(B, dtype=np.int64)
    cdef double[::1] grad = np.zeros(n_par, dtype=np.float64)
    for s in range(n_steps):
        for i in range(B):
            r = batches[s, i]
            labels[i] = y[r]
            for j in range(d):
                acts[i * d + j] = X[r, j]
        losses[s] = _loss_grad(params, sizes, ws, labels, anchors, anchored,
                               batches[s], lam, grad)
        t = step0 + s
        lr_t = lr / (1.0 + decay * t)
        c1 = 1.0 - beta1 ** (t + 1)
        c2 = 1.0 - beta2 ** (t + 1)
        with nogil:
            for p in range(n_par):
                g = grad[p]
                m[p] = beta1 * m[p] + (1.0 - beta1) * g
                v[p] = beta2 * v[p] + (1.0 - beta2) * g * g
                params[p] -= lr_t * (m[p] / c1) / (sqrt(v[p] / c2) + eps)
