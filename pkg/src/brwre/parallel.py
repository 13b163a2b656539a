"""Replica-parallel map with results in replica-index order.

A task is a picklable callable ``task(start, stop)`` that computes replicas
``start..stop-1`` and returns a dict of arrays with one leading row per
replica.  Every replica draws from its own stream keyed by its index, so
chunk boundaries and worker counts cannot change the numbers.
"""
from __future__ import annotations

import numpy as np
from joblib import Parallel, delayed

CHUNK = 64


def _chunks(n: int, chunk: int):
    return [(a, min(a + chunk, n)) for a in range(0, n, chunk)]


def map_replicas(task, n: int, workers: int = 1, chunk: int = CHUNK) -> dict:
    if n < 0:
        raise ValueError("replica count must be non-negative")
    spans = _chunks(n, chunk)
    if workers <= 1 or len(spans) <= 1:
        parts = [task(a, b) for a, b in spans]
    else:
        parts = Parallel(n_jobs=workers, backend="loky")(delayed(task)(a, b) for a, b in spans)
    if not parts:
        return {}
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
