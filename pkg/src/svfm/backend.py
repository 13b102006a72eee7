"""Kernel backend selection.

Imports the compiled Cython kernels when present, otherwise the pure-numpy
fallback.  ``SVFM_PURE_PYTHON=1`` forces the fallback regardless.

Routing reflects measurement (see benchmarks/bench_kernels.py): the compiled
loops win on dispatch-bound elementwise work at this library's operand sizes
(batches of MLP activations, width <= 64), while BLAS keeps matmul and SIMD
keeps the transcendentals, so those always go through numpy.
"""

import os

import numpy as np

from . import _kernels_py as _py

if os.environ.get("SVFM_PURE_PYTHON"):
    _impl = _py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _py

IMPL_NAME = _impl.NAME
COMPILED = _impl is not _py

# Compiled elementwise loops stop paying off once operands outgrow caches and
# numpy's per-call overhead amortizes away.
_EW_CUTOFF = 1 << 16


def _c64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b):
    return a @ b


def matmul_nt(a, b):
    return a @ b.T


def matmul_tn(a, b):
    return a.T @ b


def tanh(x):
    return np.tanh(x)


def exp(x):
    return np.exp(x)


def _ew1(fn, np_fn, x):
    if x.size > _EW_CUTOFF:
        return np_fn(x)
    return fn(_c64(x).reshape(-1)).reshape(x.shape)


def _ew2(fn, np_fn, a, b):
    if a.size > _EW_CUTOFF:
        return np_fn(a, b)
    return fn(_c64(a).reshape(-1), _c64(b).reshape(-1)).reshape(a.shape)


def relu(x):
    return _ew1(_impl.relu, _py.relu, x)


def relu_bwd(x, g):
    return _ew2(_impl.relu_bwd, _py.relu_bwd, x, g)


def add(a, b):
    return _ew2(_impl.add, _py.add, a, b)


def sub(a, b):
    return _ew2(_impl.sub, _py.sub, a, b)


def mul(a, b):
    return _ew2(_impl.mul, _py.mul, a, b)


def scale(x, s):
    if x.size > _EW_CUTOFF:
        return x * s
    return _impl.scale(_c64(x).reshape(-1), float(s)).reshape(x.shape)


def add_rowvec(a, v):
    return _impl.add_rowvec(_c64(a), _c64(v).reshape(-1))


def sum_rows(x):
    return _impl.sum_rows(_c64(x))


def softmax2(x):
    return _impl.softmax2(_c64(x))


def softmax2_bwd(y, g):
    return _impl.softmax2_bwd(_c64(y), _c64(g))
