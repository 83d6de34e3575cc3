# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled finite-horizon value iteration (synchronous sweeps, ascending state order)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def finite_horizon_vi(const double[:, :, ::1] T, const double[:, ::1] R,
                      const unsigned char[::1] terminal, int horizon, double tol):
    cdef Py_ssize_t n = R.shape[0], A = R.shape[1]
    cdef Py_ssize_t s, a, s2
    cdef int k, sweeps = 0
    cdef double acc, best, diff, residual = 0.0
    Q_arr = np.zeros((n, A), dtype=np.float64)
    Qn_arr = np.zeros((n, A), dtype=np.float64)
    V_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] Q = Q_arr
    cdef double[:, ::1] Qn = Qn_arr
    cdef double[::1] V = V_arr
    cdef double[:, ::1] tmp
    with nogil:
        for k in range(horizon):
            residual = 0.0
            for s in range(n):
                if terminal[s]:
                    for a in range(A):
                        Qn[s, a] = 0.0
                    continue
                for a in range(A):
                    acc = 0.0
                    for s2 in range(n):
                        acc = acc + T[s, a, s2] * V[s2]
                    acc = R[s, a] + acc
                    Qn[s, a] = acc
                    diff = fabs(acc - Q[s, a])
                    if diff > residual:
                        residual = diff
            for s in range(n):
                best = Qn[s, 0]
                for a in range(1, A):
                    if Qn[s, a] > best:
                        best = Qn[s, a]
                V[s] = best
            tmp = Q
            Q = Qn
            Qn = tmp
            sweeps = k + 1
            if residual < tol:
                break
    return np.asarray(Q).copy(), sweeps, residual
