"""Picklable replica tasks shared by the estimators.

``source`` is either an :class:`Environment` (quenched: every replica sees
the same rates) or an :class:`EnvironmentSpec` (annealed: replica ``k``
gets the environment ``spec.for_replica(k)``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as seeds
from .engine import (DEFAULT_POPULATION_CAP, HIT_STOP, HIT_TRACK, KIND_SPLIT, MISSING,
                     PopulationCapExceeded, simulate)
from .env import Environment, EnvironmentSpec

BRANCH_SPLIT, BRANCH_MOVE, BRANCH_CUTOFF = 0, 1, 2
BRANCH_NAMES = ("split_first", "move_first", "cutoff_first")


@dataclass(frozen=True)
class Grouped:
    """Annealed source where consecutive blocks of ``size`` replicas share one environment."""

    spec: EnvironmentSpec
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("group size must be >= 1")


def env_for(source, k: int) -> Environment:
    if isinstance(source, Environment):
        return source
    if isinstance(source, EnvironmentSpec):
        return Environment(source.for_replica(k))
    if isinstance(source, Grouped):
        return Environment(source.spec.for_replica(k // source.size))
    raise TypeError(f"expected Environment or EnvironmentSpec, got {type(source).__name__}")


def mode_of(source) -> str:
    return "quenched" if isinstance(source, Environment) else "annealed"


def _fail(k, raw, cap):
    raise PopulationCapExceeded(
        f"replica {k}: population would exceed cap {cap} at t={raw.fail_time:.6g}", replica=k)


def branch_code(raw, L: int) -> int:
    if raw.first_time >= 1.0 / L:
        return BRANCH_CUTOFF
    return BRANCH_SPLIT if raw.first_kind == KIND_SPLIT else BRANCH_MOVE


@dataclass(frozen=True)
class RecordTask:
    """Maximum on a grid plus stopping times, one row per replica."""

    source: object
    x0: int
    grid: np.ndarray
    T: float
    L: int
    seed: int
    stage: int = seeds.STAGE_ESTIMATE
    cap: int = DEFAULT_POPULATION_CAP

    def __call__(self, start, stop):
        n = stop - start
        out = {"M": np.empty((n, len(self.grid)), np.int64), "pop": np.empty(n, np.int64),
               "tau_s": np.empty(n), "tau_m": np.empty(n), "first": np.empty(n),
               "first_kind": np.empty(n, np.int64), "sigma": np.empty(n)}
        for r, k in enumerate(range(start, stop)):
            raw = simulate(self.x0, self.T, self.grid, env_for(self.source, k),
                           seeds.replica_rng(self.seed, self.stage, k), L=self.L, cap=self.cap,
                           hit_mode=HIT_TRACK)
            if raw.failed:
                _fail(k, raw, self.cap)
            out["M"][r] = raw.M
            out["pop"][r] = raw.pop
            out["tau_s"][r] = raw.tau_s
            out["tau_m"][r] = raw.tau_m
            out["first"][r] = raw.first_time
            out["first_kind"][r] = raw.first_kind
            out["sigma"][r] = raw.sigma if raw.sigma <= self.T else math.nan
        return out


@dataclass(frozen=True)
class BranchTask:
    """Branch of the first event against the cutoff and the maximum at ``tau + t``."""

    source: object
    x0: int
    t: float
    L: int
    seed: int
    stage: int = seeds.STAGE_BRANCH
    cap: int = DEFAULT_POPULATION_CAP

    def __call__(self, start, stop):
        n = stop - start
        out = {"branch": np.empty(n, np.int64), "M_after": np.empty(n, np.int64),
               "s1": np.empty(n, np.int64), "tau": np.empty(n)}
        empty = np.empty(0)
        for r, k in enumerate(range(start, stop)):
            raw = simulate(self.x0, 0.0, empty, env_for(self.source, k),
                           seeds.replica_rng(self.seed, self.stage, k), L=self.L, cap=self.cap,
                           extra_offset=self.t)
            if raw.failed:
                _fail(k, raw, self.cap)
            out["branch"][r] = branch_code(raw, self.L)
            out["M_after"][r] = raw.extra_M
            out["s1"][r] = raw.s1
            out["tau"][r] = raw.tau
        return out


@dataclass(frozen=True)
class MaxAtTask:
    """Maximum at a single time ``t`` from ``x0``."""

    source: object
    x0: int
    t: float
    seed: int
    stage: int
    cap: int = DEFAULT_POPULATION_CAP

    def __call__(self, start, stop):
        out = np.empty(stop - start, np.int64)
        grid = np.array([float(self.t)])
        for r, k in enumerate(range(start, stop)):
            raw = simulate(self.x0, self.t, grid, env_for(self.source, k),
                           seeds.replica_rng(self.seed, self.stage, k), cap=self.cap)
            if raw.failed:
                _fail(k, raw, self.cap)
            out[r] = raw.M[0]
        return {"M": out}


@dataclass(frozen=True)
class CouplingTask:
    """Per replica, in one environment: the branched run and independent copies.

    ``A``: from x0, observed at t, t + 1/L and tau + t, with its branch label.
    ``B``, ``C``: independent copies of M_t from x0.
    ``D``, ``E``: M_t from x0 + 1 and x0 - 1 (only when ``shifted``).
    """

    source: object
    x0: int
    t: float
    L: int
    seed: int
    shifted: bool = False
    cap: int = DEFAULT_POPULATION_CAP

    def __call__(self, start, stop):
        n = stop - start
        keys = ["A_t", "A_next", "A_after", "branch", "B", "C"]
        if self.shifted:
            keys += ["D", "E"]
        out = {key: np.empty(n, np.int64) for key in keys}
        grid_a = np.array([self.t, self.t + 1.0 / self.L])
        grid_t = np.array([float(self.t)])
        for r, k in enumerate(range(start, stop)):
            env = env_for(self.source, k)
            raw = simulate(self.x0, self.t + 1.0 / self.L, grid_a, env,
                           seeds.replica_rng(self.seed, seeds.STAGE_COPY_A, k), L=self.L,
                           cap=self.cap, extra_offset=self.t)
            if raw.failed:
                _fail(k, raw, self.cap)
            out["A_t"][r], out["A_next"][r] = raw.M
            out["A_after"][r] = raw.extra_M
            out["branch"][r] = branch_code(raw, self.L)
            copies = [("B", self.x0, seeds.STAGE_COPY_B), ("C", self.x0, seeds.STAGE_COPY_C)]
            if self.shifted:
                copies += [("D", self.x0 + 1, seeds.STAGE_COPY_D), ("E", self.x0 - 1, seeds.STAGE_COPY_E)]
            for key, start_site, stage in copies:
                raw = simulate(start_site, self.t, grid_t, env,
                               seeds.replica_rng(self.seed, stage, k), cap=self.cap)
                if raw.failed:
                    _fail(k, raw, self.cap)
                out[key][r] = raw.M[0]
        return out


@dataclass(frozen=True)
class HittingTask:
    """Runs from ``y`` recording sigma (time of first visit to 0).

    With ``stop`` the run ends at the hit; otherwise it continues to
    ``horizon`` and also reports the hitting particle's subtree maximum there.
    """

    source: object
    y: int
    horizon: float
    seed: int
    grid: np.ndarray = None
    stop: bool = True
    stage: int = seeds.STAGE_SIGMA
    cap: int = DEFAULT_POPULATION_CAP

    def __call__(self, start, stop):
        n = stop - start
        grid = np.empty(0) if self.grid is None else np.asarray(self.grid, float)
        out = {"sigma": np.empty(n), "M": np.empty((n, len(grid)), np.int64),
               "final": np.empty(n, np.int64), "sub_final": np.empty(n, np.int64)}
        for r, k in enumerate(range(start, stop)):
            raw = simulate(self.y, self.horizon, grid, env_for(self.source, k),
                           seeds.replica_rng(self.seed, self.stage, k), cap=self.cap,
                           hit_mode=HIT_STOP if self.stop else HIT_TRACK)
            if raw.failed:
                _fail(k, raw, self.cap)
            out["sigma"][r] = raw.sigma
            out["M"][r] = raw.M
            out["final"][r] = raw.final_max
            out["sub_final"][r] = raw.sub_final_max
        return out


@dataclass(frozen=True)
class DescendantTask:
    source: object
    x0: int
    t: float
    s: float
    seed: int
    stage: int = seeds.STAGE_VERIFY
    cap: int = DEFAULT_POPULATION_CAP

    def __call__(self, start, stop):
        out = np.empty(stop - start, np.int64)
        empty = np.empty(0)
        for r, k in enumerate(range(start, stop)):
            raw = simulate(self.x0, self.t + self.s, empty, env_for(self.source, k),
                           seeds.replica_rng(self.seed, self.stage, k), cap=self.cap,
                           tag_time=self.t)
            if raw.failed:
                _fail(k, raw, self.cap)
            out[r] = raw.delta
        return {"delta": out}


__all__ = ["Grouped", "RecordTask", "BranchTask", "MaxAtTask", "CouplingTask", "HittingTask",
           "DescendantTask", "env_for", "mode_of", "MISSING", "BRANCH_NAMES",
           "BRANCH_SPLIT", "BRANCH_MOVE", "BRANCH_CUTOFF"]
