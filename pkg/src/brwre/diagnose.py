"""Tightness diagnostics along a selected subsequence and the hitting-time decomposition checks."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as seeds
from .engine import DEFAULT_POPULATION_CAP, HIT_STOP, HIT_TRACK, simulate, time_grid
from .env import Environment, EnvironmentSpec
from .parallel import map_replicas
from .replicas import BRANCH_MOVE, BranchTask, Grouped, RecordTask, _fail, env_for
from .select import SelectionResult
from .stats import MeanSeries, mean_stderr

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def nearest_rank_quantiles(x, probs=QUANTILES, axis=0) -> np.ndarray:
    return np.quantile(np.asarray(x, float), probs, axis=axis, method="inverted_cdf")


@dataclass
class TightnessReport:
    grid: np.ndarray
    quantiles: np.ndarray       # shape (5, len(grid))
    selected: np.ndarray        # mask over grid
    replicas: int
    centering: str
    multiplier: float = 1.25

    @property
    def spread(self) -> np.ndarray:
        return self.quantiles[4] - self.quantiles[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid[self.selected]

    @property
    def max_spread_selected(self) -> float:
        return float(self.spread[self.selected].max()) if self.selected.any() else math.nan

    @property
    def median_spread_selected(self) -> float:
        return float(np.median(self.spread[self.selected])) if self.selected.any() else math.nan

    @property
    def max_spread_full(self) -> float:
        return float(self.spread.max())

    @property
    def ratio(self) -> float:
        """max / median spread over the selected times (inf when the median is 0)."""
        med = self.median_spread_selected
        if med == 0:
            return math.inf if self.max_spread_selected > 0 else 1.0
        return self.max_spread_selected / med

    @property
    def passes_growth_proxy(self) -> bool:
        return self.max_spread_selected <= self.multiplier * self.median_spread_selected

    @property
    def passes_subset(self) -> bool:
        return self.max_spread_selected <= self.max_spread_full

    def summary(self) -> dict:
        return {"schema": 1, "max_spread_selected": self.max_spread_selected,
                "median_spread_selected": self.median_spread_selected,
                "max_spread_full": self.max_spread_full, "ratio": self.ratio,
                "multiplier": self.multiplier, "growth_proxy_pass": self.passes_growth_proxy,
                "subset_pass": self.passes_subset, "replicas": self.replicas,
                "centering": self.centering, "times": self.times.tolist()}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "q05", "q25", "q50", "q75", "q95", "spread", "selected"])
            for i, t in enumerate(self.grid):
                w.writerow([repr(float(t))] + [repr(float(q)) for q in self.quantiles[:, i]]
                           + [repr(float(self.spread[i])), int(self.selected[i])])

    def save_summary(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), sort_keys=True) + "\n")


def centered_samples(source, series: MeanSeries, replicas: int, *, seed: int,
                     cap: int = DEFAULT_POPULATION_CAP, workers: int = 1, group: int = 10,
                     centering: str = "auto"):
    """Fresh maxima on the series grid, centered per time.

    ``centering``:
      * ``"series"`` subtracts the stored series means;
      * ``"environment"`` (annealed only) runs ``group`` fresh replicas per
        environment and subtracts an independent estimate of the quenched
        mean of that environment built from another ``group`` replicas;
      * ``"auto"`` is ``"series"`` for a fixed environment and
        ``"environment"`` otherwise.
    """
    if centering == "auto":
        centering = "series" if isinstance(source, Environment) else "environment"
    grid = series.grid
    T = float(grid[-1])
    if centering == "series":
        out = map_replicas(RecordTask(source, series.x0, grid, T, series.L, seed,
                                      seeds.STAGE_DIAGNOSE, cap), replicas, workers)
        return out["M"] - series.mean[None, :], centering
    if centering != "environment":
        raise ValueError(f"unknown centering {centering!r}")
    if not isinstance(source, EnvironmentSpec):
        raise ValueError("environment centering needs an annealed source")
    if replicas % group:
        raise ValueError(f"replicas ({replicas}) must be a multiple of the group size ({group})")
    shared = Grouped(source, group)
    fresh = map_replicas(RecordTask(shared, series.x0, grid, T, series.L, seed,
                                    seeds.STAGE_DIAGNOSE, cap), replicas, workers)["M"]
    ref = map_replicas(RecordTask(shared, series.x0, grid, T, series.L, seed,
                                  seeds.STAGE_CENTER, cap), replicas, workers)["M"]
    centers = ref.reshape(replicas // group, group, -1).mean(axis=1)
    return fresh - np.repeat(centers, group, axis=0), centering


def tightness_report(source, sel: SelectionResult, series: MeanSeries, replicas: int, *,
                     seed: int = 1, cap: int = DEFAULT_POPULATION_CAP, workers: int = 1,
                     multiplier: float = 1.25, centering: str = "auto", group: int = 10,
                     return_samples: bool = False):
    if replicas < 100:
        raise ValueError("need at least 100 fresh replicas")
    if len(sel.grid) != len(series.grid) or np.any(sel.grid != series.grid):
        raise ValueError("selection and series live on different grids")
    if seed == series.seed:
        raise ValueError("diagnostic replicas must use a seed different from the series seed")
    X, used = centered_samples(source, series, replicas, seed=seed, cap=cap, workers=workers,
                               group=group, centering=centering)
    rep = TightnessReport(grid=series.grid, quantiles=nearest_rank_quantiles(X), selected=sel.mask,
                          replicas=replicas, centering=used, multiplier=multiplier)
    if return_samples:
        return rep, X
    return rep


# --- hitting-time decomposition --------------------------------------------------------

@dataclass(frozen=True)
class DecompositionTask:
    """Per replica, one environment: sigma from ``y``, and fresh runs from 0.

    ``A``: M_t.  ``B``: M on the grid up to t.  ``C``: M_{t - sigma} when sigma <= t.
    """

    source: object
    y: int
    t: float
    L: int
    eta: float
    seed: int
    cap: int = DEFAULT_POPULATION_CAP

    def __call__(self, start, stop):
        n = stop - start
        grid = time_grid(self.L, self.eta, self.t)
        out = {"sigma": np.empty(n), "A": np.empty(n, np.int64),
               "B": np.empty((n, len(grid)), np.int64), "C": np.zeros(n, np.int64)}
        empty = np.empty(0)
        at_t = np.array([float(self.t)])
        for r, k in enumerate(range(start, stop)):
            env = env_for(self.source, k)
            raw = simulate(self.y, self.t, empty, env, seeds.replica_rng(self.seed, seeds.STAGE_SIGMA, k),
                           cap=self.cap, hit_mode=HIT_STOP)
            if raw.failed:
                _fail(k, raw, self.cap)
            sigma = raw.sigma if raw.sigma <= self.t else math.nan
            out["sigma"][r] = sigma
            raw = simulate(0, self.t, at_t, env, seeds.replica_rng(self.seed, seeds.STAGE_COPY_A, k),
                           cap=self.cap)
            if raw.failed:
                _fail(k, raw, self.cap)
            out["A"][r] = raw.M[0]
            raw = simulate(0, self.t, grid, env, seeds.replica_rng(self.seed, seeds.STAGE_COPY_B, k),
                           L=self.L, cap=self.cap)
            if raw.failed:
                _fail(k, raw, self.cap)
            out["B"][r] = raw.M
            if not math.isnan(sigma):
                s = self.t - sigma
                raw = simulate(0, s, np.array([s]), env,
                               seeds.replica_rng(self.seed, seeds.STAGE_COPY_C, k), cap=self.cap)
                if raw.failed:
                    _fail(k, raw, self.cap)
                out["C"][r] = raw.M[0]
        return out


@dataclass
class DecompositionReport:
    t: float
    y: int
    replicas: int
    lhs: float
    lhs_stderr: float
    binned: float               # sum over cells of P[sigma in cell] * lagged mean gap
    binned_stderr: float
    rhs: float                  # the same with survival P[sigma >= (k-1)/L] in place of cell mass
    rhs_stderr: float
    diff_stderr: float          # stderr of the paired difference rhs - lhs
    bin_terms: list
    bin_stderr: list
    lag_gaps: list              # mean(t) - mean(t - k/L), k = 1..floor(Lt)
    lag_gap_stderr: list
    holds: bool
    bins_nonnegative: bool
    monotone: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def verify_decomposition(source, t: float, replicas: int, *, y: int = 1, L: int = 1,
                         eta: float = 0.0, seed: int = 0, cap: int = DEFAULT_POPULATION_CAP,
                         workers: int = 1, k_se: float = 3.0) -> DecompositionReport:
    """Hitting-time term E[1{sigma <= t}(M_{t,1} - M_{t-sigma,1})] against its binned upper bounds.

    Each replica contributes the exact-coupling sample of the left side, the
    per-cell sample 1{sigma in [(k-1)/L, k/L)}(A_t - B_{t-k/L}) and the
    survival-weighted sample 1{sigma >= (k-1)/L}(A_t - B_{t-k/L}), all in one
    environment, so every expectation is over the same law (quenched or annealed).
    """
    if y not in (-1, 1):
        raise ValueError("y must be -1 or +1")
    grid = time_grid(L, eta, t)
    if len(grid) == 0 or abs(grid[-1] - t) > 1e-9:
        raise ValueError(f"{t} is not a grid time")
    out = map_replicas(DecompositionTask(source, y, float(t), L, eta, seed, cap), replicas, workers)
    sigma = np.where(np.isnan(out["sigma"]), np.inf, out["sigma"])
    A = out["A"].astype(float)
    B = out["B"].astype(float)
    hit = sigma <= t
    lhs_i = np.where(hit, A - out["C"], 0.0)
    nb = int(math.floor(L * t + 1e-9))
    last = len(grid) - 1
    binned_i = np.zeros(replicas)
    rhs_i = np.zeros(replicas)
    terms, term_se, gaps, gap_se = [], [], [], []
    for k in range(1, nb + 1):
        lagged = B[:, last - k]           # M at t - k/L
        gap = A - lagged
        cell = (sigma >= (k - 1) / L) & (sigma < k / L)
        term = np.where(cell, gap, 0.0)
        binned_i += term
        rhs_i += np.where(sigma >= (k - 1) / L, gap, 0.0)
        m, s = mean_stderr(term)
        terms.append(m)
        term_se.append(s)
        m, s = mean_stderr(gap)
        gaps.append(m)
        gap_se.append(s)
    # the remaining piece of [0, t] not covered by whole cells
    binned_i += np.where((sigma >= nb / L) & hit, A, 0.0)
    rhs_i += np.where(sigma >= t - eta, A, 0.0)
    lhs, lhs_se = mean_stderr(lhs_i)
    binned, binned_se = mean_stderr(binned_i)
    rhs, rhs_se = mean_stderr(rhs_i)
    slack, diff_se = mean_stderr(rhs_i - lhs_i)
    return DecompositionReport(
        t=float(t), y=y, replicas=replicas, lhs=lhs, lhs_stderr=lhs_se, binned=binned,
        binned_stderr=binned_se, rhs=rhs, rhs_stderr=rhs_se, diff_stderr=diff_se,
        bin_terms=terms, bin_stderr=term_se, lag_gaps=gaps, lag_gap_stderr=gap_se,
        holds=slack >= -k_se * diff_se,
        bins_nonnegative=all(m >= -k_se * s for m, s in zip(terms, term_se)),
        monotone=all(g >= -2 * s for g, s in zip(gaps, gap_se)))


@dataclass(frozen=True)
class SideTermTask:
    """First-event label from 0, a run from ``y`` on the grid with its hitting time, and a fresh run from 0."""

    source: object
    y: int
    grid: np.ndarray
    L: int
    seed: int
    cap: int = DEFAULT_POPULATION_CAP

    def __call__(self, start, stop):
        n = stop - start
        T = float(self.grid[-1])
        out = {"move": np.empty(n, bool), "sigma": np.empty(n),
               "X": np.empty((n, len(self.grid)), np.int64), "Y": np.empty((n, len(self.grid)), np.int64)}
        first = BranchTask(self.source, 0, 0.0, self.L, self.seed, seeds.STAGE_SIDE, self.cap)(start, stop)
        out["move"][:] = first["branch"] == BRANCH_MOVE
        for r, k in enumerate(range(start, stop)):
            env = env_for(self.source, k)
            raw = simulate(self.y, T, self.grid, env, seeds.replica_rng(self.seed, seeds.STAGE_SIGMA, k),
                           L=self.L, cap=self.cap, hit_mode=HIT_TRACK)
            if raw.failed:
                _fail(k, raw, self.cap)
            out["sigma"][r] = raw.sigma if raw.sigma <= T else math.inf
            out["Y"][r] = raw.M
            raw = simulate(0, T, self.grid, env, seeds.replica_rng(self.seed, seeds.STAGE_COPY_A, k),
                           L=self.L, cap=self.cap)
            if raw.failed:
                _fail(k, raw, self.cap)
            out["X"][r] = raw.M
        return out


@dataclass
class SideTermReport:
    grid: np.ndarray
    y: int
    value: np.ndarray
    stderr: np.ndarray
    running_max: np.ndarray
    argmax_time: float
    p_move: float
    replicas: int
    from_time: float
    trend_ok: bool

    def to_dict(self) -> dict:
        return {"grid": self.grid.tolist(), "y": self.y, "value": self.value.tolist(),
                "stderr": self.stderr.tolist(), "running_max": self.running_max.tolist(),
                "argmax_time": self.argmax_time, "p_move": self.p_move, "replicas": self.replicas,
                "from_time": self.from_time, "trend_ok": self.trend_ok}


def verify_sideterm_bounded(source, T: float, replicas: int, *, y: int = 1, L: int = 1,
                            eta: float = 0.0, seed: int = 0, from_time: float = 4.0,
                            cap: int = DEFAULT_POPULATION_CAP, workers: int = 1,
                            k_se: float = 3.0) -> SideTermReport:
    """E[1{tau = tau_m} 1{sigma^y > t} (M_{t,1} - M_t^y)] on the grid up to T.

    The trend check asks the positive part of the estimate to be
    non-increasing from ``from_time`` on, up to ``k_se`` standard errors.
    """
    if y not in (-1, 1):
        raise ValueError("y must be -1 or +1")
    grid = time_grid(L, eta, T)
    out = map_replicas(SideTermTask(source, y, grid, L, seed, cap), replicas, workers)
    alive = out["sigma"][:, None] > grid[None, :]
    terms = np.where(out["move"][:, None] & alive, out["X"] - out["Y"], 0).astype(float)
    value = terms.mean(axis=0)
    se = terms.std(axis=0, ddof=1) / math.sqrt(replicas)
    run = np.maximum.accumulate(value)
    pos = np.maximum(value, 0.0)
    late = np.flatnonzero(grid >= from_time)
    ok = all(pos[b] <= pos[a] + k_se * math.hypot(se[a], se[b]) for a, b in zip(late[:-1], late[1:]))
    return SideTermReport(grid=grid, y=y, value=value, stderr=se, running_max=run,
                          argmax_time=float(grid[int(np.argmax(value))]),
                          p_move=float(out["move"].mean()), replicas=replicas,
                          from_time=float(from_time), trend_ok=bool(ok and np.all(np.isfinite(value))))


__all__ = ["TightnessReport", "tightness_report", "centered_samples", "nearest_rank_quantiles",
           "DecompositionReport", "verify_decomposition", "SideTermReport", "verify_sideterm_bounded"]
