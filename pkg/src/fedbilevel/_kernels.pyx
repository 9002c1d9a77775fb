# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Neumann-chain kernels.  Contract mirrors ``_kernels_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def neumann_chain(const double[:, ::1] Q, const double[:, :, ::1] noise, double scale,
                  double step, const double[:, ::1] V, bint accumulate=False):
    cdef Py_ssize_t k = noise.shape[0]
    cdef Py_ssize_t p = Q.shape[0]
    cdef Py_ssize_t n = V.shape[0]
    cdef Py_ssize_t i, r, j, l
    cdef double acc, h
    cdef double half = 0.5 * scale
    if V.shape[1] != p or Q.shape[1] != p:
        raise ValueError("dimension mismatch in neumann_chain")
    if k > 0 and (noise.shape[1] != p or noise.shape[2] != p):
        raise ValueError("noise stack has wrong shape")

    cur_arr = np.array(V, dtype=np.float64, copy=True, order="C")
    tmp_arr = np.empty(p, dtype=np.float64)
    out_arr = np.array(V, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] cur = cur_arr
    cdef double[::1] tmp = tmp_arr
    cdef double[:, ::1] out = out_arr

    for i in range(k):
        for r in range(n):
            for j in range(p):
                acc = 0.0
                for l in range(p):
                    h = Q[j, l] + half * (noise[i, j, l] + noise[i, l, j])
                    acc += h * cur[r, l]
                tmp[j] = acc
            for j in range(p):
                cur[r, j] -= step * tmp[j]
                if accumulate:
                    out[r, j] += cur[r, j]
    if accumulate:
        return out_arr
    return cur_arr
