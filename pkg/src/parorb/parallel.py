"""Orbital-parallel execution and phase timing.

Only elementwise per-orbital work is dispatched to workers. Reductions stay
on the calling thread, so results do not depend on the worker count.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable

import numpy as np


class OrbitalPool:
    """Applies a row-wise function to blocks of an ``(N, N_g)`` array."""

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.workers = int(workers)
        self._executor = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def map_rows(self, fn: Callable[[np.ndarray], np.ndarray], X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        if self._executor is None or X.shape[0] < 2:
            return fn(X)
        out = np.empty_like(X, dtype=float)
        bounds = np.linspace(0, X.shape[0], min(self.workers, X.shape[0]) + 1).astype(int)

        def run(a, b):
            out[a:b] = fn(X[a:b])

        futures = [
            self._executor.submit(run, a, b) for a, b in zip(bounds[:-1], bounds[1:])
        ]
        for f in futures:
            f.result()
        return out

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class PhaseTimer:
    """Accumulates wall time spent in orbital-parallel versus barrier phases."""

    def __init__(self):
        self.parallel = 0.0
        self.sync = 0.0

    @contextmanager
    def phase(self, kind: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            dt = time.perf_counter() - t0
            if kind == "parallel":
                self.parallel += dt
            else:
                self.sync += dt

    @property
    def total(self) -> float:
        return self.parallel + self.sync


_SERIAL = OrbitalPool(1)


def serial_pool() -> OrbitalPool:
    return _SERIAL
