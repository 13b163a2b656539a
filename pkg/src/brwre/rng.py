"""Seed derivation for reproducible, scheduling-independent randomness.

Every random stream in the package is keyed by a tuple of non-negative
integers ``(experiment seed, stage tag, index)`` and expanded with
:class:`numpy.random.SeedSequence`.  Replica ``k`` of a stage therefore
draws the same numbers whether it runs first, last, or in another process.

Per-site environment draws use a counter-based hash instead of a stream:
the uniform attached to a site is a pure function of ``(key, site)``.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# Stage tags.  Changing these changes every downstream number.
STAGE_ENV = 1
STAGE_ENV_REPLICA = 2
STAGE_SIMULATE = 10
STAGE_ESTIMATE = 11
STAGE_SIGMA = 12
STAGE_DIAGNOSE = 13
STAGE_VERIFY = 14
STAGE_BRANCH = 15
STAGE_COPY_A = 16
STAGE_COPY_B = 17
STAGE_COPY_C = 18
STAGE_COPY_D = 19
STAGE_COPY_E = 20
STAGE_CENTER = 21
STAGE_SIDE = 22

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


def _u64(seed: int) -> int:
    seed = int(seed)
    if seed < 0:
        raise ValueError(f"seeds must be non-negative, got {seed}")
    return seed


def seed_sequence(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([_u64(p) for p in parts])


def replica_rng(seed: int, stage: int, replica: int) -> np.random.Generator:
    """Independent generator for one replica of one stage."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, stage, replica)))


def derive_key(*parts: int) -> int:
    """64-bit key for counter-based hashing, derived from integer parts."""
    return int(seed_sequence(*parts).generate_state(1, dtype=np.uint64)[0])


@njit(cache=True)
def zigzag(site):
    # ..., -2, -1, 0, 1, 2, ... -> ..., 3, 1, 0, 2, 4, ...
    if site >= 0:
        return np.uint64(2 * site)
    return np.uint64(-2 * site - 1)


@njit(cache=True)
def site_uniform(key, site):
    """SplitMix64 output at counter ``zigzag(site)``; uniform on [0, 1)."""
    z = np.uint64(key) + (zigzag(site) + np.uint64(1)) * _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    z = z ^ (z >> _S31)
    return float(z >> _S11) * _INV53
