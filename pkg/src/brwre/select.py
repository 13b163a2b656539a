"""Subsequence selection on an estimated mean series.

All predicates read only the stored point estimates, so re-running a
selection on the same series is bit-identical.  Grid times are addressed by
their index ``k`` (time ``eta + k / L``).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .stats import MeanSeries

KINDS = ("oben", "fixed_j", "B_set", "final_intersection")


@dataclass(frozen=True)
class SelectionParams:
    delta: float
    L: int
    eta: float
    x_star: float
    C1: float = math.nan

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if int(self.L) < 1:
            raise ValueError("L must be a positive integer")
        if not 0 <= self.eta < 1.0 / self.L:
            raise ValueError("eta must lie in [0, 1/L)")
        if not (self.x_star > 0 and math.isfinite(self.x_star)):
            raise ValueError(f"x_star must be positive and finite, got {self.x_star}")

    def with_delta(self, delta: float) -> "SelectionParams":
        return SelectionParams(delta, self.L, self.eta, self.x_star, self.C1)

    def density_factor(self) -> float:
        """delta * e^{C1/L} / (e^{C1/(2L)} - 1)^2; the B-set density bound needs it below 1."""
        return self.delta * math.exp(self.C1 / self.L) / math.expm1(self.C1 / (2 * self.L)) ** 2

    def density_condition(self) -> bool:
        return self.C1 > 0 and self.density_factor() < 1

    def to_dict(self) -> dict:
        return asdict(self)


def density_delta(delta: float, C1: float, L: int) -> float:
    """The delta that gives a B set of density (1 + delta)/L."""
    if not C1 > 0:
        raise ValueError("C1 must be positive")
    return delta * math.expm1(C1 / (2 * L)) ** 2 / math.exp(C1 / L)


@dataclass
class SelectionResult:
    kind: str
    grid: np.ndarray
    mask: np.ndarray                 # True where selected
    params: SelectionParams
    predicate: np.ndarray = None     # value compared to the threshold (nan where undefined)
    threshold: np.ndarray = None
    censored: np.ndarray = None      # True where the predicate needs data past the horizon
    j: int = 0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, float)
        self.mask = np.asarray(self.mask, bool)
        n = len(self.grid)
        if self.predicate is None:
            self.predicate = np.full(n, np.nan)
        if self.threshold is None:
            self.threshold = np.full(n, np.nan)
        if self.censored is None:
            self.censored = np.zeros(n, bool)

    @property
    def selected(self) -> np.ndarray:
        return self.grid[self.mask]

    @property
    def excluded(self) -> np.ndarray:
        return self.grid[~self.mask]

    @property
    def K(self) -> np.ndarray:
        """K[n - 1] = number of excluded grid times below ``n / L + eta``, n = 1..len(grid)."""
        return np.cumsum(~self.mask)

    @property
    def label(self) -> str:
        return f"fixed_j({self.j})" if self.kind == "fixed_j" else self.kind

    def to_dict(self) -> dict:
        return {"schema": 1, "kind": self.label, "params": self.params.to_dict(),
                "selected": self.selected.tolist(), "excluded": self.excluded.tolist(),
                "censored": self.grid[self.censored].tolist(), "K_n": self.K.tolist()}

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "selected_flag", "predicate_value", "threshold"])
            for t, m, p, th in zip(self.grid, self.mask, self.predicate, self.threshold):
                w.writerow([repr(float(t)), int(m), repr(float(p)), repr(float(th))])


def _check_series(series: MeanSeries, params: SelectionParams):
    if len(series.grid) == 0:
        raise ValueError("empty mean series")
    if series.L != params.L or abs(series.eta - params.eta) > 1e-12:
        raise ValueError("series grid does not match the selection parameters")


def oben_threshold(params: SelectionParams) -> float:
    return 2.0 * params.x_star / (params.L * params.delta)


def select_oben(series: MeanSeries, params: SelectionParams) -> SelectionResult:
    """Keep t with mean(t + 1/L) - mean(t) <= 2 x* / (L delta)."""
    _check_series(series, params)
    n = len(series.grid)
    thr = oben_threshold(params)
    pred = np.full(n, np.nan)
    pred[:-1] = np.diff(series.mean)
    censored = np.zeros(n, bool)
    censored[-1] = True
    mask = np.zeros(n, bool)
    mask[:-1] = pred[:-1] <= thr
    return SelectionResult("oben", series.grid, mask, params, pred, np.full(n, thr), censored)


def fixed_j_threshold(params: SelectionParams, j: int) -> float:
    """(2 / (L delta)) x* j e^{C1 (j - 1) / (2L)}."""
    growth = 1.0 if j == 1 else math.exp(params.C1 / (2 * params.L) * (j - 1))
    return 2.0 / (params.L * params.delta) * params.x_star * j * growth


def select_fixed_j(series: MeanSeries, j: int, params: SelectionParams) -> SelectionResult:
    """Keep t >= j/L + eta with mean(t) - mean(t - j/L) under the lag-j threshold.

    Times below the lag are excluded by convention.
    """
    _check_series(series, params)
    j = int(j)
    if j < 1:
        raise ValueError("j must be >= 1")
    n = len(series.grid)
    if j >= n:
        raise ValueError(f"lag {j} exceeds the span of the series ({n} grid points)")
    if j > 1 and not params.C1 > 0:
        raise ValueError("C1 must be positive for lags j > 1")
    thr = fixed_j_threshold(params, j)
    pred = np.full(n, np.nan)
    pred[j:] = series.mean[j:] - series.mean[:-j]
    mask = np.zeros(n, bool)
    mask[j:] = pred[j:] <= thr
    return SelectionResult("fixed_j", series.grid, mask, params, pred, np.full(n, thr), j=j)


def lag_one_violators(series: MeanSeries, j: int, params: SelectionParams) -> np.ndarray:
    """Mask of t whose lag-1 increment exceeds the lag-1 threshold scaled for level j."""
    growth = 1.0 if j == 1 else math.exp(params.C1 / (2 * params.L) * (j - 1))
    thr = 2.0 / (params.L * params.delta) * params.x_star * growth
    out = np.zeros(len(series.grid), bool)
    out[1:] = np.diff(series.mean) > thr
    return out


def counting_check(series: MeanSeries, j: int, params: SelectionParams) -> dict:
    """K_n <= j * K~_n + j for every n, on the computed sets."""
    K = select_fixed_j(series, j, params).K
    K_tilde = np.cumsum(lag_one_violators(series, j, params))
    bound = j * K_tilde + j
    return {"j": j, "K_n": K.tolist(), "K_tilde_n": K_tilde.tolist(),
            "holds": bool(np.all(K <= bound)), "max_excess": int(np.max(K - bound))}


def window_size(t: float, C1: float, L: int) -> int:
    """max(1, ceil((2L / C1) log t)); t <= 1 gives 1."""
    if t <= 1:
        return 1
    return max(1, math.ceil(2 * L / C1 * math.log(t)))


def build_B(series: MeanSeries, params: SelectionParams) -> SelectionResult:
    """Keep t where the lag-j predicate holds for every j up to the log window at t."""
    _check_series(series, params)
    if not params.C1 > 0:
        raise ValueError(f"C1 must be positive, got {params.C1}")
    n = len(series.grid)
    mask = np.zeros(n, bool)
    worst = np.full(n, np.nan)
    for k, t in enumerate(series.grid):
        w = window_size(t, params.C1, params.L)
        if w > k:
            # some lag in the window reaches below the first grid time
            continue
        gaps = [series.mean[k] - series.mean[k - j] for j in range(1, w + 1)]
        thr = [fixed_j_threshold(params, j) for j in range(1, w + 1)]
        # the CSV predicate column reports the worst gap-to-threshold ratio
        worst[k] = max(g / h for g, h in zip(gaps, thr))
        mask[k] = all(g <= h for g, h in zip(gaps, thr))
    return SelectionResult("B_set", series.grid, mask, params, worst, np.ones(n))


def intersect(a: SelectionResult, b: SelectionResult, params: SelectionParams = None) -> SelectionResult:
    if len(a.grid) != len(b.grid) or np.any(a.grid != b.grid):
        raise ValueError("selections live on different grids")
    params = a.params if params is None else params
    res = SelectionResult("final_intersection", a.grid, a.mask & b.mask, params,
                          censored=a.censored | b.censored)
    if np.any(res.K > a.K + b.K):
        raise AssertionError("intersection exclusion count exceeds the sum of its parts")
    return res


@dataclass
class DensityReport:
    t: np.ndarray
    k: np.ndarray
    ratio: np.ndarray           # t_k / k
    K_over_n: np.ndarray        # K_n / n for n = 1..len(grid)
    k_min: int
    tail_max: float

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "k": self.k.tolist(), "ratio": self.ratio.tolist(),
                "K_over_n": self.K_over_n.tolist(), "k_min": self.k_min, "tail_max": self.tail_max}


def density_report(sel: SelectionResult, tail_fraction: float = 0.2) -> DensityReport:
    """t_k / k over the increasing enumeration t_1 < t_2 < ... of the selection."""
    t = sel.selected
    if t.size == 0:
        raise ValueError("empty selection")
    k = np.arange(1, t.size + 1)
    ratio = t / k
    k_min = max(1, math.ceil(tail_fraction * t.size))
    n = np.arange(1, len(sel.grid) + 1)
    return DensityReport(t=t, k=k, ratio=ratio, K_over_n=sel.K / n, k_min=k_min,
                         tail_max=float(ratio[k_min - 1:].max()))


def brute_force_membership(series: MeanSeries, sel: SelectionResult) -> np.ndarray:
    """Recompute membership from the defining inequality, one grid time at a time."""
    p = sel.params
    m = series.mean

    def lag_thr(j):
        growth = math.exp(p.C1 / (2 * p.L) * (j - 1)) if j > 1 else 1.0
        return (2 / (p.L * p.delta)) * p.x_star * j * growth

    out = np.zeros(len(series.grid), bool)
    for k in range(len(series.grid)):
        if sel.kind == "oben":
            out[k] = k + 1 < len(m) and m[k + 1] - m[k] <= 2 * p.x_star / (p.L * p.delta)
        elif sel.kind == "fixed_j":
            j = sel.j
            out[k] = k >= j and m[k] - m[k - j] <= lag_thr(j)
        elif sel.kind == "B_set":
            w = max(1, math.ceil(2 * p.L / p.C1 * math.log(series.grid[k]))) if series.grid[k] > 1 else 1
            out[k] = all(k >= j and m[k] - m[k - j] <= lag_thr(j) for j in range(1, w + 1))
        else:
            raise ValueError(f"no direct predicate for kind {sel.kind}")
    return out


__all__ = ["SelectionParams", "SelectionResult", "DensityReport", "density_delta",
           "select_oben", "select_fixed_j", "build_B", "intersect", "density_report",
           "lag_one_violators", "counting_check", "window_size", "brute_force_membership",
           "oben_threshold", "fixed_j_threshold"]
