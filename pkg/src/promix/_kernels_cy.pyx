# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: row softmax and the fused tuning-step loss/grad.

Contracts match promix._kernels_py exactly; single pass over each (B, C)
block, no temporaries beyond the output arrays.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double PROB_FLOOR = 1e-300


def softmax_rows(cnp.ndarray z_in):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] z = np.ascontiguousarray(z_in, dtype=np.float64)
    cdef Py_ssize_t b = z.shape[0], c = z.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((b, c), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double m, total
    for i in range(b):
        m = z[i, 0]
        for j in range(1, c):
            if z[i, j] > m:
                m = z[i, j]
        total = 0.0
        for j in range(c):
            out[i, j] = exp(z[i, j] - m)
            total += out[i, j]
        for j in range(c):
            out[i, j] /= total
    return out


def prompt_step(cnp.ndarray s_in, cnp.ndarray y_in, double tau, double w):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] s = np.ascontiguousarray(s_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] y = np.ascontiguousarray(y_in, dtype=np.int64)
    cdef Py_ssize_t b = s.shape[0], c = s.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g = np.empty((b, c), dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double m, total, z, py, coef, loss
    loss = 0.0
    for i in range(b):
        m = s[i, 0]
        for j in range(1, c):
            if s[i, j] > m:
                m = s[i, j]
        total = 0.0
        for j in range(c):
            z = exp((s[i, j] - m) / tau)
            g[i, j] = z
            total += z
        py = g[i, y[i]] / total
        if py < PROB_FLOOR:
            loss += -log(PROB_FLOOR) + w * (1.0 - py)
        else:
            loss += -log(py) + w * (1.0 - py)
        coef = (1.0 + w * py) / (tau * b)
        for j in range(c):
            g[i, j] = g[i, j] / total * coef
        g[i, y[i]] = -(1.0 - py) * coef
    return loss / b, g
