# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

The workloads here are many small dense operations (MLP layers of width
32-64 evaluated inside Runge-Kutta stages), where per-call dispatch overhead
dominates.  These loops beat numpy below roughly 64x64 operands; the wrapper
layer in ``backend.py`` routes larger operands back to BLAS.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp
from libc.math cimport tanh as c_tanh

cnp.import_array()

NAME = "cython"

ctypedef cnp.float64_t f64


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out_arr


def matmul_nt(double[:, ::1] a, double[:, ::1] b):
    # a @ b.T with b stored row-major: contiguous inner loops on both operands
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            out[i, j] = acc
    return out_arr


def matmul_tn(double[:, ::1] a, double[:, ::1] b):
    # a.T @ b
    cdef Py_ssize_t k = a.shape[0], m = a.shape[1], n = b.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, p
    cdef double av
    for p in range(k):
        for i in range(m):
            av = a[p, i]
            for j in range(n):
                out[i, j] += av * b[p, j]
    return out_arr


def relu(double[::1] x):
    out_arr = np.empty(x.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = x[i] if x[i] > 0.0 else 0.0
    return out_arr


def relu_bwd(double[::1] x, double[::1] g):
    out_arr = np.empty(x.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = g[i] if x[i] > 0.0 else 0.0
    return out_arr


def tanh(double[::1] x):
    out_arr = np.empty(x.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_tanh(x[i])
    return out_arr


def exp(double[::1] x):
    out_arr = np.empty(x.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_exp(x[i])
    return out_arr


def add(double[::1] a, double[::1] b):
    out_arr = np.empty(a.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        out[i] = a[i] + b[i]
    return out_arr


def sub(double[::1] a, double[::1] b):
    out_arr = np.empty(a.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        out[i] = a[i] - b[i]
    return out_arr


def mul(double[::1] a, double[::1] b):
    out_arr = np.empty(a.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(a.shape[0]):
        out[i] = a[i] * b[i]
    return out_arr


def scale(double[::1] x, double s):
    out_arr = np.empty(x.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = x[i] * s
    return out_arr


def add_rowvec(double[:, ::1] a, double[::1] v):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(n):
            out[i, j] = a[i, j] + v[j]
    return out_arr


def sum_rows(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(n):
            out[j] += x[i, j]
    return out_arr


def softmax2(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, tot
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        tot = 0.0
        for j in range(n):
            out[i, j] = c_exp(x[i, j] - mx)
            tot += out[i, j]
        for j in range(n):
            out[i, j] /= tot
    return out_arr


def softmax2_bwd(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    out_arr = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out_arr
