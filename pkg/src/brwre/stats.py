"""Monte Carlo estimators and analytic oracles."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import rng as seeds
from .engine import DEFAULT_POPULATION_CAP, time_grid
from .env import Environment, EnvironmentSpec
from .parallel import map_replicas
from .replicas import (BRANCH_CUTOFF, BRANCH_MOVE, BRANCH_SPLIT, BranchTask, CouplingTask,
                       HittingTask, MaxAtTask, RecordTask)


class AllCensored(RuntimeError):
    """No replica reached the target site before the deadline."""


def mean_stderr(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()) if x.size else math.nan, 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def closed_form_c(xi0: float, L: int) -> float:
    """P[tau_s < tau_m ^ 1/L] for a single particle at a site with split rate ``xi0``."""
    if not xi0 > 0 or int(L) < 1 or not math.isfinite(xi0):
        raise ValueError(f"need xi0 > 0 and L >= 1, got xi0={xi0}, L={L}")
    return -math.expm1(-(xi0 + 1.0) / L) * xi0 / (xi0 + 1.0)


def source_description(source) -> dict:
    if isinstance(source, Environment):
        return {"mode": "quenched", "env": source.spec.to_dict()}
    return {"mode": "annealed", "env": source.to_dict()}


# --- mean series ------------------------------------------------------------------

@dataclass
class MeanSeries:
    L: int
    eta: float
    grid: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    mode: str
    env: dict
    replicas: int
    x0: int = 0
    seed: int = 0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, float)
        self.mean = np.asarray(self.mean, float)
        self.stderr = np.asarray(self.stderr, float)
        if not (len(self.grid) == len(self.mean) == len(self.stderr)):
            raise ValueError("grid, mean and stderr lengths differ")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid times must be strictly increasing")
        steps = (self.grid - self.eta) * self.L
        if np.any(np.abs(steps - np.round(steps)) > 1e-9) or np.any(steps < -1e-9):
            raise ValueError("grid times must lie on N/L + eta")

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    def index_of(self, t: float) -> int:
        k = int(round((t - self.eta) * self.L))
        if not (0 <= k < len(self.grid)) or abs(self.grid[k] - t) > 1e-9:
            raise ValueError(f"{t} is not a grid time of this series")
        return k

    def to_dict(self) -> dict:
        return {"schema": 1, "L": self.L, "eta": self.eta, "grid": self.grid.tolist(),
                "mean": self.mean.tolist(), "stderr": self.stderr.tolist(), "mode": self.mode,
                "env": self.env, "replicas": self.replicas, "x0": self.x0, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "MeanSeries":
        return cls(L=int(d["L"]), eta=float(d["eta"]), grid=d["grid"], mean=d["mean"],
                   stderr=d["stderr"], mode=d["mode"], env=d["env"], replicas=int(d["replicas"]),
                   x0=int(d.get("x0", 0)), seed=int(d.get("seed", 0)))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load_json(cls, path) -> "MeanSeries":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mean", "stderr"])
            for row in zip(self.grid, self.mean, self.stderr):
                w.writerow([repr(float(v)) for v in row])


def estimate_mean_series(source, L: int, eta: float, T: float, replicas: int, *,
                         seed: int = 0, x0: int = 0, cap: int = DEFAULT_POPULATION_CAP,
                         workers: int = 1, return_samples: bool = False):
    """Sample mean and standard error of the maximum on ``N/L + eta`` up to ``T``.

    A fixed :class:`Environment` gives the quenched mean; an
    :class:`EnvironmentSpec` draws a fresh environment per replica.
    """
    if replicas < 2:
        raise ValueError("need at least 2 replicas")
    grid = time_grid(L, eta, T)
    out = map_replicas(RecordTask(source, x0, grid, T, L, seed, seeds.STAGE_ESTIMATE, cap),
                       replicas, workers)
    M = out["M"].astype(float)
    series = MeanSeries(L=L, eta=eta, grid=grid, mean=M.mean(axis=0),
                        stderr=M.std(axis=0, ddof=1) / math.sqrt(replicas),
                        replicas=replicas, x0=x0, seed=seed, **source_description(source))
    if return_samples:
        return series, out["M"]
    return series


def monotone_violations(series: MeanSeries, k: float = 2.0) -> list[dict]:
    """Adjacent pairs whose mean decreases by more than ``k`` combined standard errors."""
    bad = []
    for i in range(len(series.grid) - 1):
        drop = series.mean[i] - series.mean[i + 1]
        band = k * math.hypot(series.stderr[i], series.stderr[i + 1])
        if drop > band:
            bad.append({"t": float(series.grid[i]), "drop": float(drop), "band": float(band)})
    return bad


def xstar_hat(series: MeanSeries, factor: float = 1.2) -> float:
    """Finite-horizon proxy for the linear growth bound of E[M_t]."""
    late = (series.grid >= series.T / 2) & (series.grid > 0)
    if not late.any():
        raise ValueError("series has no positive grid time in its second half")
    return factor * float(np.max(series.mean[late] / series.grid[late]))


# --- sigma tail -------------------------------------------------------------------

@dataclass
class SurvivalCurve:
    z: np.ndarray
    survival: np.ndarray
    n: int
    C1_hat: float
    r2: float
    y: int
    fit_points: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z", "survival", "n"])
            for z, s in zip(self.z, self.survival):
                w.writerow([repr(float(z)), repr(float(s)), self.n])

    def to_dict(self) -> dict:
        return {"z": self.z.tolist(), "survival": self.survival.tolist(), "n": self.n,
                "C1_hat": self.C1_hat, "r2": self.r2, "y": self.y, "fit_points": self.fit_points}


def survival_from_sigma(sigma, z_grid) -> np.ndarray:
    """Empirical P[sigma >= z]; censored replicas carry ``nan`` and count as survivors."""
    s = np.where(np.isnan(sigma), np.inf, sigma)
    return np.array([(s >= z).mean() for z in z_grid])


def fit_exponential_tail(z, survival, n: int, floor_count: float = 20.0) -> tuple[float, float, int]:
    """Negative slope and R^2 of log-survival against z over points with survival >= floor/n."""
    z = np.asarray(z, float)
    survival = np.asarray(survival, float)
    keep = survival >= floor_count / n
    if keep.sum() < 2:
        return math.nan, math.nan, int(keep.sum())
    zz, ll = z[keep], np.log(survival[keep])
    if np.ptp(ll) == 0:
        return 0.0, 0.0, int(keep.sum())
    fit = sps.linregress(zz, ll)
    return float(-fit.slope), float(fit.rvalue ** 2), int(keep.sum())


def estimate_sigma_tail(source, y: int, z_grid, replicas: int, *, seed: int = 0,
                        cap: int = DEFAULT_POPULATION_CAP, workers: int = 1,
                        return_samples: bool = False):
    if y not in (-1, 1):
        raise ValueError("y must be -1 or +1")
    z_grid = np.asarray(z_grid, float)
    if np.any(np.diff(z_grid) <= 0):
        raise ValueError("z grid must be increasing")
    deadline = float(z_grid[-1])
    out = map_replicas(HittingTask(source, y, deadline, seed, stop=True, cap=cap), replicas, workers)
    sigma = out["sigma"]
    if np.all(np.isnan(sigma)):
        raise AllCensored(f"no replica reached 0 from {y} before t={deadline}")
    surv = survival_from_sigma(sigma, z_grid)
    c1, r2, npts = fit_exponential_tail(z_grid, surv, replicas)
    curve = SurvivalCurve(z=z_grid, survival=surv, n=replicas, C1_hat=c1, r2=r2, y=y, fit_points=npts)
    if return_samples:
        return curve, sigma
    return curve


# --- gaps and the main inequality ---------------------------------------------------

@dataclass
class GapEstimate:
    t: float
    value: float
    stderr: float


def estimate_abs_gap(source, t: float, replicas: int, *, seed: int = 0, x0: int = 0,
                     cap: int = DEFAULT_POPULATION_CAP, workers: int = 1, return_samples=False):
    """E|M_{t,1} - M_{t,2}| for two copies sharing the environment."""
    a = map_replicas(MaxAtTask(source, x0, t, seed, seeds.STAGE_COPY_B, cap), replicas, workers)["M"]
    b = map_replicas(MaxAtTask(source, x0, t, seed, seeds.STAGE_COPY_C, cap), replicas, workers)["M"]
    gap = np.abs(a - b).astype(float)
    est = GapEstimate(t, *mean_stderr(gap))
    if return_samples:
        return est, a, b
    return est


@dataclass
class MainInequalityReport:
    t: float
    L: int
    lhs: float
    rhs: float
    slack: float
    stderr: float
    replicas: int
    seed: int
    c: float
    increment: float
    side_term: float
    cutoff_term: float
    move_term: float
    holds: bool

    def to_dict(self) -> dict:
        return asdict(self)


def verify_main_inequality(source, t: float, L: int, replicas: int, *, seed: int = 0,
                           x0: int = 0, cap: int = DEFAULT_POPULATION_CAP, workers: int = 1,
                           k: float = 3.0) -> MainInequalityReport:
    """E|M_{t,1}-M_{t,2}| against c^-1 (E[M_{t+1/L}-M_t] + E[1{tau != tau_s}(M_{t,1}-M_{t+tau})]).

    The constant is taken at the infimum rate of the environment law.
    """
    ei = source.ei if isinstance(source, (Environment, EnvironmentSpec)) else None
    c = closed_form_c(ei, L)
    out = map_replicas(CouplingTask(source, x0, t, L, seed, cap=cap), replicas, workers)
    not_split = out["branch"] != BRANCH_SPLIT
    inc = (out["A_next"] - out["A_t"]).astype(float)
    side = np.where(not_split, out["B"] - out["A_after"], 0).astype(float)
    lhs_i = np.abs(out["B"] - out["C"]).astype(float)
    slack_i = (inc + side) / c - lhs_i
    lhs, _ = mean_stderr(lhs_i)
    slack, se = mean_stderr(slack_i)
    cutoff = np.where(out["branch"] == BRANCH_CUTOFF, out["B"] - out["A_after"], 0)
    move = np.where(out["branch"] == BRANCH_MOVE, out["B"] - out["A_after"], 0)
    return MainInequalityReport(
        t=float(t), L=int(L), lhs=lhs, rhs=lhs + slack, slack=slack, stderr=se,
        replicas=replicas, seed=seed, c=c, increment=float(inc.mean()), side_term=float(side.mean()),
        cutoff_term=float(cutoff.mean()), move_term=float(move.mean()), holds=slack >= -k * se)


@dataclass
class FirstJumpReport:
    t: float
    lhs: float
    rhs: float
    diff: float
    diff_stderr: float
    cutoff_term: float
    cutoff_stderr: float
    translation_gap: float
    translation_stderr: float
    replicas: int
    holds: bool
    cutoff_holds: bool

    def to_dict(self) -> dict:
        return asdict(self)


def verify_first_jump_split(source, t: float, L: int, replicas: int, *, seed: int = 0,
                            x0: int = 0, cap: int = DEFAULT_POPULATION_CAP, workers: int = 1,
                            k: float = 3.0) -> FirstJumpReport:
    """Split on the first jump and the vanishing cutoff branch.

    On {tau = tau_m} the continuation is a fresh process from x0 + S_1;
    both sides are estimated on the same replicas and compared through
    the paired difference.
    """
    out = map_replicas(CouplingTask(source, x0, t, L, seed, shifted=True, cap=cap), replicas, workers)
    move = out["branch"] == BRANCH_MOVE
    B = out["B"].astype(float)
    lhs_i = np.where(move, B - out["A_after"], 0.0)
    rhs_i = np.where(move, B - 0.5 * (out["D"] + out["E"]), 0.0)
    lhs, _ = mean_stderr(lhs_i)
    rhs, _ = mean_stderr(rhs_i)
    diff, diff_se = mean_stderr(lhs_i - rhs_i)
    cut, cut_se = mean_stderr(np.where(out["branch"] == BRANCH_CUTOFF, B - out["A_after"], 0.0))
    gap, gap_se = mean_stderr((out["D"] - out["E"]).astype(float))
    return FirstJumpReport(t=float(t), lhs=lhs, rhs=rhs, diff=diff, diff_stderr=diff_se,
                           cutoff_term=cut, cutoff_stderr=cut_se, translation_gap=gap,
                           translation_stderr=gap_se, replicas=replicas,
                           holds=abs(diff) <= k * diff_se, cutoff_holds=abs(cut) <= k * cut_se)


# --- first-event and identity checks --------------------------------------------------

def split_first_frequency(source, L: int, replicas: int, *, seed: int = 0, x0: int = 0,
                          workers: int = 1) -> tuple[float, float, np.ndarray]:
    """Empirical P[tau_s < tau_m ^ 1/L] with its standard error; also returns branch codes."""
    out = map_replicas(BranchTask(source, x0, 0.0, L, seed), replicas, workers)
    hits = (out["branch"] == BRANCH_SPLIT).astype(float)
    return (*mean_stderr(hits), out["branch"])


@dataclass
class KSResult:
    statistic: float
    pvalue: float


def ks_two_sample(a, b) -> KSResult:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    res = sps.ks_2samp(a, b, method="asymp")
    return KSResult(float(res.statistic), float(res.pvalue))


@dataclass
class DekkingHostReport:
    t: float
    L: int
    samples: int
    attempts: int
    split_fraction: float
    ks: KSResult
    mean_conditional: float
    mean_max_of_two: float


def dekking_host_identity(source, t: float, L: int, samples: int, *, seed: int = 0,
                          x0: int = 0, cap: int = DEFAULT_POPULATION_CAP,
                          workers: int = 1) -> DekkingHostReport:
    """Law of M_{t+tau} given a split first, against the max of two independent copies of M_t.

    The conditional law is sampled by rejection on the branch label.
    """
    kept = []
    attempts = 0
    batch = max(64, int(samples * 1.2))
    while sum(len(x) for x in kept) < samples:
        out = map_replicas(_Offset(BranchTask(source, x0, t, L, seed, cap=cap), attempts), batch, workers)
        kept.append(out["M_after"][out["branch"] == BRANCH_SPLIT])
        attempts += batch
        batch = max(64, samples // 4)
    cond = np.concatenate(kept)[:samples]
    one = map_replicas(MaxAtTask(source, x0, t, seed, seeds.STAGE_COPY_B, cap), samples, workers)["M"]
    two = map_replicas(MaxAtTask(source, x0, t, seed, seeds.STAGE_COPY_C, cap), samples, workers)["M"]
    both = np.maximum(one, two)
    return DekkingHostReport(t=float(t), L=int(L), samples=samples, attempts=attempts,
                             split_fraction=samples / attempts if attempts else math.nan,
                             ks=ks_two_sample(cond, both), mean_conditional=float(cond.mean()),
                             mean_max_of_two=float(both.mean()))


@dataclass(frozen=True)
class _Offset:
    """Shift a task's replica indices so successive batches use fresh streams."""

    task: object
    offset: int

    def __call__(self, start, stop):
        return self.task(start + self.offset, stop + self.offset)


def geometric_gof(pop, p: float, min_expected: float = 5.0) -> tuple[float, float, int]:
    """Chi-square goodness of fit of counts in {1, 2, ...} against Geometric(p).

    Cells with small expected counts are pooled into the upper tail.
    """
    pop = np.asarray(pop, np.int64)
    n = pop.size
    edges = []
    k = 1
    tail = 1.0
    while True:
        pk = p * (1 - p) ** (k - 1)
        if n * pk < min_expected or n * (tail - pk) < min_expected:
            break
        edges.append(k)
        tail -= pk
        k += 1
    obs = [int((pop == j).sum()) for j in edges] + [int((pop >= k).sum())]
    exp = [n * p * (1 - p) ** (j - 1) for j in edges] + [n * tail]
    res = sps.chisquare(obs, exp)
    return float(res.statistic), float(res.pvalue), len(obs)


__all__ = [
    "AllCensored", "MeanSeries", "SurvivalCurve", "GapEstimate", "MainInequalityReport",
    "FirstJumpReport", "KSResult", "DekkingHostReport", "closed_form_c", "estimate_mean_series",
    "estimate_sigma_tail", "estimate_abs_gap", "verify_main_inequality", "verify_first_jump_split",
    "ks_two_sample", "dekking_host_identity", "split_first_frequency", "monotone_violations",
    "xstar_hat", "geometric_gof", "mean_stderr", "survival_from_sigma", "fit_exponential_tail",
]
