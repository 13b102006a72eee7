#!/usr/bin/env python3
"""Compare the compiled kernel backend against the pure-numpy fallback.

Covers the microkernels on the operand sizes this library actually produces
(hidden widths 32/64, batches up to a few hundred) plus one end-to-end solve.
Run after building the extension:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from svfm import _kernels_py
from svfm import backend

try:
    from svfm import _kernels
except ImportError:
    _kernels = None


def timeit(fn, *args, repeat=20000):
    fn(*args)  # warm
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best * 1e6  # microseconds


def bench_kernels():
    rng = np.random.default_rng(0)
    cases = [
        ("matmul 1x34 @ 34x32", "matmul", (rng.normal(size=(1, 34)), rng.normal(size=(34, 32)))),
        ("matmul 100x34 @ 34x32", "matmul", (rng.normal(size=(100, 34)), rng.normal(size=(34, 32)))),
        ("matmul 100x64 @ 64x64", "matmul", (rng.normal(size=(100, 64)), rng.normal(size=(64, 64)))),
        ("relu 100x32", "relu", (rng.normal(size=3200),)),
        ("add 100x32", "add", (rng.normal(size=3200), rng.normal(size=3200))),
        ("tanh 100x32", "tanh", (rng.normal(size=3200),)),
        ("softmax 100x4", "softmax2", (rng.normal(size=(100, 4)),)),
        ("add_rowvec 100x32", "add_rowvec", (rng.normal(size=(100, 32)), rng.normal(size=32))),
        ("sum_rows 100x32", "sum_rows", (rng.normal(size=(100, 32)),)),
    ]
    print(f"{'kernel':26s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for label, name, args in cases:
        args = tuple(np.ascontiguousarray(a) for a in args)
        t_py = timeit(getattr(_kernels_py, name), *args)
        if _kernels is None:
            print(f"{label:26s} {t_py:10.2f} {'n/a':>10s} {'n/a':>8s}")
            continue
        t_cy = timeit(getattr(_kernels, name), *args)
        print(f"{label:26s} {t_py:10.2f} {t_cy:10.2f} {t_py / t_cy:7.2f}x")


def bench_end_to_end():
    import os
    import subprocess
    import sys
    import textwrap

    code = textwrap.dedent(
        """
        import time
        import numpy as np
        import svfm
        from svfm.autodiff import Tensor, no_grad
        from svfm.fields import FlowContext, build_field_model
        from svfm.odesolve import Dopri5Method, solve_ivp

        model = build_field_model("vf", state_dim=2, hidden_layers=2, hidden_units=64, seed=0)
        ctx = FlowContext(model, selection="mean")
        x = np.random.default_rng(0).normal(size=(100, 2))
        with no_grad():
            solve_ivp(ctx, Tensor(x), 0.0, 1.0, Dopri5Method())  # warm
            t0 = time.perf_counter()
            for _ in range(20):
                solve_ivp(ctx, Tensor(x), 0.0, 1.0, Dopri5Method())
            dt = (time.perf_counter() - t0) / 20
        print(f"  backend={svfm.IMPL_NAME:7s} batch-100 dopri5 solve: {dt*1e3:.2f} ms")
        """
    )
    print("\nend-to-end (fresh process per backend):")
    for env_flag in ("0", "1"):
        env = dict(os.environ, SVFM_PURE_PYTHON=env_flag) if env_flag == "1" else dict(os.environ)
        env.pop("SVFM_PURE_PYTHON", None) if env_flag == "0" else None
        subprocess.run([sys.executable, "-c", code], env=env, check=True)


if __name__ == "__main__":
    print(f"compiled extension available: {_kernels is not None}; active backend: {backend.IMPL_NAME}\n")
    bench_kernels()
    bench_end_to_end()
