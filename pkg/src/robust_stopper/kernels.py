"""Backend selection for the hot loops.

The compiled extension is used when it imports; ``ROBUST_STOPPER_PURE=1``
forces the numpy fallback. ``ROBUST_STOPPER_THREADS`` caps the number of
worker threads used to sweep policy ranges.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("ROBUST_STOPPER_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _impl(backend):
    if backend is None:
        backend = BACKEND
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    if backend == "python":
        return _kernels_py
    raise ValueError(f"unknown backend {backend!r}")


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])


def thread_cap() -> int:
    raw = os.environ.get("ROBUST_STOPPER_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return max(1, min(8, os.cpu_count() or 1))


def grid_backward(payoff, fcost, qup, qdn, mode, nu, backend=None):
    impl = _impl(backend)
    return impl.grid_backward(
        np.ascontiguousarray(payoff, dtype=np.float64),
        np.ascontiguousarray(fcost, dtype=np.float64),
        np.ascontiguousarray(qup, dtype=np.float64),
        np.ascontiguousarray(qdn, dtype=np.float64),
        np.ascontiguousarray(mode, dtype=np.uint8),
        int(nu),
    )


def oracle_extrema(stop, cont, payoff, qup, qdn, fcost, n_policies, backend=None,
                   threads=None):
    """Sweep every policy index in ``[0, n_policies)``; see ``_kernels_py``."""
    impl = _impl(backend)
    args = (
        np.ascontiguousarray(stop, dtype=np.uint8),
        np.ascontiguousarray(cont, dtype=np.uint8),
        np.ascontiguousarray(payoff, dtype=np.float64),
        np.ascontiguousarray(qup, dtype=np.float64),
        np.ascontiguousarray(qdn, dtype=np.float64),
        np.ascontiguousarray(fcost, dtype=np.float64),
    )
    threads = thread_cap() if threads is None else max(1, int(threads))
    n_chunks = min(threads, max(1, n_policies // 4096))
    bounds = np.linspace(0, n_policies, n_chunks + 1).astype(np.int64)
    spans = [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
    if len(spans) == 1:
        parts = [impl.oracle_extrema(*args, *spans[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(spans)) as pool:
            parts = list(pool.map(lambda s: impl.oracle_extrema(*args, *s), spans))
    rule_min, rule_arg, upper, upper_arg = parts[0]
    rule_min, rule_arg = rule_min.copy(), rule_arg.copy()
    for rm, ra, up, ua in parts[1:]:
        better = rm < rule_min
        rule_min = np.where(better, rm, rule_min)
        rule_arg = np.where(better, ra, rule_arg)
        if up < upper:
            upper, upper_arg = up, ua
    return rule_min, rule_arg, float(upper), int(upper_arg)
