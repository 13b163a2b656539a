"""Exact continuous-time simulation of branching random walk in random environment.

Each particle carries a rate-1 move clock (step +-1 with probability 1/2)
and a split clock of rate ``xi(x)`` at its current site.  By memorylessness
the whole system is one exponential race of total rate
``sum_i (1 + xi(x_i))``, resolved one event at a time.

The fast path (:func:`simulate`) stores occupation counts per site.
Particles sharing a site are exchangeable, so choosing a site with weight
``n(x) (1 + xi(x))`` and then a uniform particle there has the same law as
choosing a particle with weight ``1 + xi``.  Individual particles that must
be followed (the subtree rooted at the particle that first reaches 0, or a
uniformly chosen line of descent) are carried as tag counts on top.

:class:`ParticleSystem` / :func:`next_event` keep explicit particle lists.
They are slow and exist as an independent reference route for tests.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .env import Environment, rate_from_key
from .rng import seed_sequence

DEFAULT_POPULATION_CAP = 2_000_000
MISSING = -(2**62)

HIT_NONE = 0
HIT_TRACK = 1
HIT_STOP = 2

# float outputs
F_FIRST, F_TAU_S, F_TAU_M, F_SIGMA, F_FAIL, F_EXTRA_T, F_END = range(7)
# int outputs
I_FIRST_KIND, I_S1, I_POP, I_STATUS, I_EXTRA_M, I_SUB_FINAL, I_FINAL, I_DELTA, I_EVENTS = range(9)

KIND_MOVE = 0
KIND_SPLIT = 1

STATUS_OK = 0
STATUS_CAP = 1
STATUS_WINDOW = 2


class PopulationCapExceeded(RuntimeError):
    """The particle count would exceed the configured cap.

    ``record`` holds whatever was observed before the failure time.
    """

    def __init__(self, message, record=None, replica=None):
        super().__init__(message)
        self.record = record
        self.replica = replica


@njit(cache=True)
def _fenwick_build(cnt):
    size = cnt.shape[0]
    tree = np.zeros(size + 1, np.int64)
    for i in range(size):
        k = i + 1
        tree[k] += cnt[i]
        parent = k + (k & -k)
        if parent <= size:
            tree[parent] += tree[k]
    return tree


@njit(cache=True)
def _fenwick_add(tree, i, delta):
    k = i + 1
    size = tree.shape[0] - 1
    while k <= size:
        tree[k] += delta
        k += k & -k


@njit(cache=True, error_model="numpy")
def _fenwick_find(tree, r):
    """Index ``i`` with prefix(i) <= r < prefix(i + 1), and ``r - prefix(i)``."""
    size = tree.shape[0] - 1
    pos = 0
    step = size
    while step > 0:
        nxt = pos + step
        if nxt <= size and tree[nxt] <= r:
            pos = nxt
            r -= tree[nxt]
        step >>= 1
    return pos, r


@njit(cache=True, error_model="numpy")
def _simulate(x0, horizon, grid, family, lo, hi, p_lo, key, rng, cap, cutoff,
              extra_offset, hit_mode, tag_time, width):
    ng = grid.shape[0]
    M = np.full(ng, MISSING, np.int64)
    subM = np.full(ng, MISSING, np.int64)
    fo = np.full(7, np.nan)
    io = np.zeros(9, np.int64)
    io[I_EXTRA_M] = MISSING
    io[I_SUB_FINAL] = MISSING

    # candidate events arrive at rate n_tot * (1 + hi) and are thinned to 1 + xi(x)
    bound = 1.0 + hi
    base = x0 - width // 2
    cnt = np.zeros(width, np.int64)
    sub = np.zeros(width, np.int64)
    rate = np.empty(width)
    for i in range(width):
        rate[i] = rate_from_key(family, lo, hi, p_lo, key, base + i)
    i0 = x0 - base
    cnt[i0] = 1
    tree = _fenwick_build(cnt)
    n_tot = 1
    imax = i0
    smax = -1  # index of the rightmost tagged particle, -1 if none

    hz = horizon
    extra_t = -1.0
    extra_done = extra_offset < 0.0
    tau_known = False
    tag_done = tag_time < 0.0
    tag_idx = -1
    tag_start = 0
    sigma = np.nan
    if hit_mode != HIT_NONE and x0 == 0:
        sigma = 0.0
        if hit_mode == HIT_TRACK:
            sub[i0] = 1
            smax = i0
    sgi = 0
    gi = 0
    t = 0.0
    events = 0
    first = True
    status = 0

    while True:
        tn = t + rng.standard_exponential() / (n_tot * bound)
        i, offset = _fenwick_find(tree, int(rng.random() * n_tot))
        xi = rate[i]
        v = rng.random() * bound
        real = v < 1.0 + xi
        if first and not tau_known:
            if real and tn < cutoff:
                tau_known = True
                fo[F_FIRST] = tn
            elif tn >= cutoff:
                tau_known = True
            if tau_known and not extra_done:
                extra_t = min(tn, cutoff) + extra_offset
                fo[F_EXTRA_T] = extra_t
                if extra_t > hz:
                    hz = extra_t
        # observations strictly before the next event see the current state
        while gi < ng and grid[gi] < tn:
            M[gi] = base + imax
            gi += 1
        if smax >= 0:
            while sgi < ng and sigma + grid[sgi] <= horizon and sigma + grid[sgi] < tn:
                subM[sgi] = base + smax
                sgi += 1
        if not extra_done and tau_known and extra_t < tn:
            io[I_EXTRA_M] = base + imax
            extra_done = True
        if not tag_done and tag_time < tn:
            tag_idx = imax
            tag_start = base + imax
            tag_done = True
        if tn > hz and (extra_done or tau_known):
            if not first:
                break
            if real:
                # the first event is still classified so tau_s / tau_m are defined
                fo[F_FIRST] = tn
                if v < xi:
                    io[I_FIRST_KIND] = KIND_SPLIT
                    fo[F_TAU_S] = tn
                else:
                    io[I_FIRST_KIND] = KIND_MOVE
                    io[I_S1] = 1 if v - xi < 0.5 else -1
                    fo[F_TAU_M] = tn
                break
        t = tn
        if not real or tn > hz:
            continue
        events += 1

        if smax >= 0:
            tagged = offset < sub[i]
        else:
            tagged = tag_idx == i and offset == 0

        if v < xi:
            if n_tot + 1 > cap:
                status = STATUS_CAP
                fo[F_FAIL] = t
                break
            cnt[i] += 1
            _fenwick_add(tree, i, 1)
            n_tot += 1
            if tagged and smax >= 0:
                sub[i] += 1
            if np.isnan(fo[F_TAU_S]):
                fo[F_TAU_S] = t
            if first:
                fo[F_FIRST] = t
                io[I_FIRST_KIND] = KIND_SPLIT
        else:
            d = 1 if v - xi < 0.5 else -1
            j = i + d
            if j < 0 or j >= width:
                status = STATUS_WINDOW
                break
            cnt[i] -= 1
            cnt[j] += 1
            _fenwick_add(tree, i, -1)
            _fenwick_add(tree, j, 1)
            if j > imax:
                imax = j
            elif i == imax and cnt[i] == 0:
                while cnt[imax] == 0:
                    imax -= 1
            if tagged:
                if smax >= 0:
                    sub[i] -= 1
                    sub[j] += 1
                    if j > smax:
                        smax = j
                    elif i == smax and sub[i] == 0:
                        while sub[smax] == 0:
                            smax -= 1
                else:
                    tag_idx = j
            if np.isnan(fo[F_TAU_M]):
                fo[F_TAU_M] = t
            if first:
                fo[F_FIRST] = t
                io[I_FIRST_KIND] = KIND_MOVE
                io[I_S1] = d
            if hit_mode != HIT_NONE and np.isnan(sigma) and base + j == 0:
                sigma = t
                if hit_mode == HIT_STOP:
                    break
                sub[j] = 1
                smax = j
        first = False

    fo[F_SIGMA] = sigma
    fo[F_END] = t if status else hz
    io[I_POP] = n_tot
    io[I_STATUS] = status
    io[I_FINAL] = base + imax
    if smax >= 0:
        io[I_SUB_FINAL] = base + smax
    if tag_idx >= 0:
        io[I_DELTA] = base + tag_idx - tag_start
    io[I_EVENTS] = events
    return M, subM, fo, io


def _nan_to_none(x: float) -> Optional[float]:
    return None if x is None or math.isnan(x) else float(x)


@dataclass(frozen=True)
class SimConfig:
    x0: int = 0
    T: float = 0.0
    L: int = 1
    eta: float = 0.0
    population_cap: int = DEFAULT_POPULATION_CAP
    replica_seed: int = 0

    def __post_init__(self):
        if not self.T >= 0:
            raise ValueError(f"horizon T must be >= 0, got {self.T}")
        if int(self.L) < 1:
            raise ValueError(f"L must be a positive integer, got {self.L}")
        if not 0 <= self.eta < 1.0 / self.L:
            raise ValueError(f"eta must lie in [0, 1/L), got {self.eta}")
        if int(self.population_cap) < 1:
            raise ValueError("population_cap must be >= 1")

    def grid(self) -> np.ndarray:
        return time_grid(self.L, self.eta, self.T)


def time_grid(L: int, eta: float, T: float) -> np.ndarray:
    """Points of ``N/L + eta`` in ``[0, T]``."""
    if T < eta:
        return np.empty(0)
    k_max = int(math.floor((T - eta) * L + 1e-9))
    return eta + np.arange(k_max + 1) / L


@dataclass
class RawRun:
    """Unpacked kernel output; fields are in kernel units (sites, times)."""

    grid: np.ndarray
    M: np.ndarray
    sub_M: np.ndarray
    first_time: float
    first_kind: int
    s1: int
    tau_s: float
    tau_m: float
    sigma: float
    extra_time: float
    extra_M: int
    final_max: int
    sub_final_max: int
    delta: int
    pop: int
    events: int
    failed: bool
    fail_time: float
    cutoff: float

    @property
    def tau(self) -> float:
        return min(self.first_time, self.cutoff)

    def branch(self, L: int) -> str:
        if self.first_time >= 1.0 / L:
            return "cutoff_first"
        return "split_first" if self.first_kind == KIND_SPLIT else "move_first"


def _window_width(reach: float, es: float) -> int:
    # the extreme particles travel at speed < 2 + es; the margin makes overflow negligible
    half = 16 + int(math.ceil((2.0 + es) * reach))
    width = 64
    while width < 2 * half:
        width *= 2
    return width


def simulate(x0: int, T: float, grid, env: Environment, rng: np.random.Generator, *,
             L: int = 1, cap: int = DEFAULT_POPULATION_CAP, extra_offset: float = -1.0,
             hit_mode: int = HIT_NONE, tag_time: float = -1.0) -> RawRun:
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    args = env.kernel_args()
    reach = max(float(T), 1.0 / L + max(extra_offset, 0.0))
    width = _window_width(reach, env.es)
    state = rng.bit_generator.state
    while True:
        M, subM, fo, io = _simulate(int(x0), float(T), grid, *args, rng, int(cap), 1.0 / L,
                                    float(extra_offset), int(hit_mode), float(tag_time), width)
        if io[I_STATUS] != STATUS_WINDOW:
            break
        # replay the identical path on a wider window
        rng.bit_generator.state = state
        width *= 4
    run = RawRun(
        grid=grid, M=M, sub_M=subM,
        first_time=fo[F_FIRST], first_kind=int(io[I_FIRST_KIND]), s1=int(io[I_S1]),
        tau_s=fo[F_TAU_S], tau_m=fo[F_TAU_M], sigma=fo[F_SIGMA],
        extra_time=fo[F_EXTRA_T], extra_M=int(io[I_EXTRA_M]),
        final_max=int(io[I_FINAL]), sub_final_max=int(io[I_SUB_FINAL]),
        delta=int(io[I_DELTA]), pop=int(io[I_POP]), events=int(io[I_EVENTS]),
        failed=io[I_STATUS] == STATUS_CAP, fail_time=fo[F_FAIL], cutoff=1.0 / L,
    )
    return run


@dataclass
class TrajectoryRecord:
    grid: np.ndarray
    M: np.ndarray
    tau_s: Optional[float]
    tau_m: Optional[float]
    tau: float
    sigma: Optional[float]
    pop: int
    replica: int = 0

    @classmethod
    def from_raw(cls, raw: RawRun, T: float, replica: int = 0, grid_mask=None) -> "TrajectoryRecord":
        grid, M = raw.grid, raw.M
        if raw.failed:
            keep = M != MISSING
            grid, M = grid[keep], M[keep]
        if grid_mask is not None:
            grid, M = grid[grid_mask], M[grid_mask]

        sigma = raw.sigma
        return cls(grid=np.asarray(grid, float), M=np.asarray(M, np.int64),
                   tau_s=_nan_to_none(raw.tau_s), tau_m=_nan_to_none(raw.tau_m),
                   tau=float(raw.tau), sigma=None if math.isnan(sigma) or sigma > T else float(sigma),
                   pop=raw.pop, replica=replica)

    def to_dict(self) -> dict:
        return {"replica": int(self.replica), "grid": [float(g) for g in self.grid],
                "M": [int(m) for m in self.M], "tau_s": self.tau_s, "tau_m": self.tau_m,
                "tau": self.tau, "sigma": self.sigma, "pop": int(self.pop)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryRecord":
        return cls(grid=np.asarray(d["grid"], float), M=np.asarray(d["M"], np.int64),
                   tau_s=d["tau_s"], tau_m=d["tau_m"], tau=d["tau"], sigma=d["sigma"],
                   pop=d["pop"], replica=d.get("replica", 0))


def _config_rng(config: SimConfig) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(config.replica_seed)))


def _check(raw: RawRun, config: SimConfig, record):
    if raw.failed:
        raise PopulationCapExceeded(
            f"population would exceed cap {config.population_cap} at t={raw.fail_time:.6g}",
            record=record)


def run(config: SimConfig, env: Environment, rng: np.random.Generator = None) -> TrajectoryRecord:
    """Simulate one replica from ``config.x0`` up to ``config.T``."""
    rng = _config_rng(config) if rng is None else rng
    raw = simulate(config.x0, config.T, config.grid(), env, rng, L=config.L,
                   cap=config.population_cap)
    rec = TrajectoryRecord.from_raw(raw, config.T)
    _check(raw, config, rec)
    return rec


@dataclass
class HittingResult:
    sigma: Optional[float]
    embedded: Optional[TrajectoryRecord]
    full: TrajectoryRecord
    full_final_max: int
    embedded_final_max: Optional[int]


def run_hitting(config: SimConfig, env: Environment, rng: np.random.Generator = None,
                stop_at_hit: bool = False) -> HittingResult:
    """Run from ``y = config.x0`` and follow the subtree of the first particle to reach 0.

    The embedded record lives on the clock restarted at the hitting time:
    entry ``g`` is the subtree maximum at absolute time ``sigma + g``.
    """
    if config.x0 not in (-1, 1):
        raise ValueError(f"hitting runs start at y in {{-1, +1}}, got {config.x0}")
    rng = _config_rng(config) if rng is None else rng
    raw = simulate(config.x0, config.T, config.grid(), env, rng, L=config.L,
                   cap=config.population_cap, hit_mode=HIT_STOP if stop_at_hit else HIT_TRACK)
    full = TrajectoryRecord.from_raw(raw, config.T)
    _check(raw, config, full)
    sigma = None if math.isnan(raw.sigma) or raw.sigma > config.T else float(raw.sigma)
    embedded = None
    emb_final = None
    if sigma is not None and not stop_at_hit:
        mask = raw.sub_M != MISSING
        emb_grid = raw.grid[mask]
        embedded = TrajectoryRecord(grid=emb_grid, M=raw.sub_M[mask], tau_s=None, tau_m=None,
                                    tau=float("nan"), sigma=0.0, pop=0)
        emb_final = raw.sub_final_max
    return HittingResult(sigma=sigma, embedded=embedded, full=full,
                         full_final_max=raw.final_max, embedded_final_max=emb_final)


@dataclass
class BranchSample:
    branch: str
    s1: int
    tau: float
    M_after: int          # maximum at time tau + t
    record: TrajectoryRecord


def run_dekking_host_branch(config: SimConfig, t: float, env: Environment,
                            rng: np.random.Generator = None) -> BranchSample:
    """Classify the first event against the 1/L cutoff and observe the maximum at ``tau + t``."""
    rng = _config_rng(config) if rng is None else rng
    raw = simulate(config.x0, config.T, config.grid(), env, rng, L=config.L,
                   cap=config.population_cap, extra_offset=float(t))
    rec = TrajectoryRecord.from_raw(raw, config.T)
    _check(raw, config, rec)
    branch = raw.branch(config.L)
    return BranchSample(branch=branch, s1=raw.s1 if branch == "move_first" else 0,
                        tau=raw.tau, M_after=raw.extra_M, record=rec)


def track_uniform_descendant(config: SimConfig, env: Environment, s: float,
                             rng: np.random.Generator = None) -> int:
    """Displacement over ``[T, T + s]`` of a uniform line of descent from a maximal particle at T."""
    if s < 0:
        raise ValueError("s must be >= 0")
    rng = _config_rng(config) if rng is None else rng
    raw = simulate(config.x0, config.T + s, np.empty(0), env, rng, L=config.L,
                   cap=config.population_cap, tag_time=config.T)
    if raw.failed:
        raise PopulationCapExceeded(f"population would exceed cap {config.population_cap}")
    return raw.delta


# --- particle-level reference route -------------------------------------------------

@dataclass
class ParticleSystem:
    positions: list
    time: float = 0.0
    births: int = 0

    @classmethod
    def start(cls, x0: int) -> "ParticleSystem":
        return cls(positions=[int(x0)])

    @property
    def size(self) -> int:
        return len(self.positions)

    def maximum(self) -> int:
        return max(self.positions)


@dataclass(frozen=True)
class Event:
    dt: float
    index: int
    kind: str          # "move" or "split"
    step: int = 0      # +-1 for moves


def next_event(system: ParticleSystem, env: Environment, rng: np.random.Generator) -> Event:
    if not system.positions:
        raise ValueError("empty particle system")
    rates = np.array([env.rate_at(x) for x in system.positions])
    w = 1.0 + rates
    cum = np.cumsum(w)
    dt = rng.standard_exponential() / cum[-1]
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    idx = min(idx, len(cum) - 1)
    if rng.random() * w[idx] < rates[idx]:
        return Event(dt, idx, "split")
    return Event(dt, idx, "move", 1 if rng.random() < 0.5 else -1)


def apply_event(system: ParticleSystem, event: Event) -> None:
    system.time += event.dt
    if event.kind == "split":
        system.positions.append(system.positions[event.index])
        system.births += 1
    else:
        system.positions[event.index] += event.step


def run_reference(config: SimConfig, env: Environment, rng: np.random.Generator) -> TrajectoryRecord:
    """Particle-by-particle simulation via :func:`next_event`; slow, small horizons only."""
    grid = config.grid()
    system = ParticleSystem.start(config.x0)
    M = np.empty(len(grid), np.int64)
    gi = 0
    tau_s = tau_m = None
    first_time = None
    while True:
        ev = next_event(system, env, rng)
        tn = system.time + ev.dt
        if first_time is None:
            first_time = tn
            if ev.kind == "split":
                tau_s = tn
            else:
                tau_m = tn
        while gi < len(grid) and grid[gi] < tn:
            M[gi] = system.maximum()
            gi += 1
        if tn > config.T:
            break
        if system.size + (ev.kind == "split") > config.population_cap:
            raise PopulationCapExceeded("population cap exceeded in reference run")
        apply_event(system, ev)
        if ev.kind == "split" and tau_s is None:
            tau_s = tn
        if ev.kind == "move" and tau_m is None:
            tau_m = tn
    return TrajectoryRecord(grid=grid, M=M, tau_s=tau_s, tau_m=tau_m,
                            tau=min(first_time, 1.0 / config.L), sigma=None, pop=system.size)
