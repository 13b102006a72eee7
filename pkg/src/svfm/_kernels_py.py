"""Pure-numpy implementations of the hot kernels.

Fallback backend used when the compiled extension is unavailable (or when
``SVFM_PURE_PYTHON=1``).  Signatures mirror ``_kernels.pyx`` exactly: every
function takes C-contiguous float64 arrays and returns a fresh array.
"""

import numpy as np

NAME = "numpy"


def matmul(a, b):
    return a @ b


def matmul_nt(a, b):
    return a @ b.T


def matmul_tn(a, b):
    return a.T @ b


def relu(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, g):
    return np.where(x > 0.0, g, 0.0)


def tanh(x):
    return np.tanh(x)


def exp(x):
    return np.exp(x)


def add(a, b):
    return a + b


def sub(a, b):
    return a - b


def mul(a, b):
    return a * b


def scale(x, s):
    return x * s


def add_rowvec(a, v):
    return a + v


def sum_rows(x):
    return x.sum(axis=0)


def softmax2(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax2_bwd(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)
