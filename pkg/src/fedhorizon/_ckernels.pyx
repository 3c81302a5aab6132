# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled classifier-head kernels.

Loop-based Cython implementation of the same contract as
``fedhorizon._pykernels`` (see that module for the semantics). Per-batch
accumulation runs in ascending sample order, so results are deterministic
for a fixed input.
"""

import numpy as np

from libc.math cimport exp, log

cdef double PROB_FLOOR = 1e-12


def predict_probs(double[:, ::1] w1, double[::1] b1,
                  double[:, ::1] w2, double[::1] b2,
                  double[:, ::1] x):
    """Class probabilities for a batch ``x`` of shape (n, input_dim)."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t h = w1.shape[1]
    cdef Py_ssize_t k = w2.shape[1]
    out = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] p = out
    hid_arr = np.empty(h, dtype=np.float64)
    cdef double[::1] hid = hid_arr
    cdef Py_ssize_t i, j, c
    cdef double acc, m, s

    for i in range(n):
        for j in range(h):
            acc = b1[j]
            for c in range(d):
                acc += x[i, c] * w1[c, j]
            hid[j] = acc if acc > 0.0 else 0.0
        m = -1e308
        for c in range(k):
            acc = b2[c]
            for j in range(h):
                acc += hid[j] * w2[j, c]
            p[i, c] = acc
            if acc > m:
                m = acc
        s = 0.0
        for c in range(k):
            p[i, c] = exp(p[i, c] - m)
            s += p[i, c]
        for c in range(k):
            p[i, c] /= s
    return out


def loss_and_grad(double[:, ::1] w1, double[::1] b1,
                  double[:, ::1] w2, double[::1] b2,
                  double[:, ::1] x, long[::1] y, double reg):
    """Regularized empirical risk and gradient; see the numpy backend."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t h = w1.shape[1]
    cdef Py_ssize_t k = w2.shape[1]

    gw1_arr = np.zeros((d, h), dtype=np.float64)
    gb1_arr = np.zeros(h, dtype=np.float64)
    gw2_arr = np.zeros((h, k), dtype=np.float64)
    gb2_arr = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] gw1 = gw1_arr
    cdef double[::1] gb1 = gb1_arr
    cdef double[:, ::1] gw2 = gw2_arr
    cdef double[::1] gb2 = gb2_arr

    hid_arr = np.empty(h, dtype=np.float64)
    dz2_arr = np.empty(k, dtype=np.float64)
    dz1_arr = np.empty(h, dtype=np.float64)
    cdef double[::1] hid = hid_arr
    cdef double[::1] dz2 = dz2_arr
    cdef double[::1] dz1 = dz1_arr

    cdef Py_ssize_t i, j, c
    cdef double acc, m, s, py, xv, loss, sq
    cdef double inv_n = 1.0 / n

    loss = 0.0
    for i in range(n):
        for j in range(h):
            acc = b1[j]
            for c in range(d):
                acc += x[i, c] * w1[c, j]
            hid[j] = acc if acc > 0.0 else 0.0
        m = -1e308
        for c in range(k):
            acc = b2[c]
            for j in range(h):
                acc += hid[j] * w2[j, c]
            dz2[c] = acc
            if acc > m:
                m = acc
        s = 0.0
        for c in range(k):
            dz2[c] = exp(dz2[c] - m)
            s += dz2[c]
        for c in range(k):
            dz2[c] /= s

        py = dz2[y[i]]
        if py < PROB_FLOOR:
            py = PROB_FLOOR
        loss += -log(py)

        # dz2 <- (softmax - onehot) / n
        dz2[y[i]] -= 1.0
        for c in range(k):
            dz2[c] *= inv_n
            gb2[c] += dz2[c]
        for j in range(h):
            for c in range(k):
                gw2[j, c] += hid[j] * dz2[c]
            if hid[j] > 0.0:
                acc = 0.0
                for c in range(k):
                    acc += dz2[c] * w2[j, c]
                dz1[j] = acc
                gb1[j] += acc
            else:
                dz1[j] = 0.0
        for c in range(d):
            xv = x[i, c]
            for j in range(h):
                gw1[c, j] += xv * dz1[j]
    loss *= inv_n

    sq = 0.0
    for c in range(d):
        for j in range(h):
            sq += w1[c, j] * w1[c, j]
            gw1[c, j] += 2.0 * reg * w1[c, j]
    for j in range(h):
        sq += b1[j] * b1[j]
        gb1[j] += 2.0 * reg * b1[j]
    for j in range(h):
        for c in range(k):
            sq += w2[j, c] * w2[j, c]
            gw2[j, c] += 2.0 * reg * w2[j, c]
    for c in range(k):
        sq += b2[c] * b2[c]
        gb2[c] += 2.0 * reg * b2[c]
    loss += reg * sq

    return loss, gw1_arr, gb1_arr, gw2_arr, gb2_arr
