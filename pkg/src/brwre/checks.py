"""Named verification checks with their acceptance bands.

Each check returns ``{"check", "pass", "observed", "expected", "band", ...}``.
"""
from __future__ import annotations

import math

import numpy as np

from . import diagnose, select, stats
from .env import Environment, EnvironmentSpec
from .parallel import map_replicas
from .replicas import RecordTask
from . import rng as seeds

CHECKS = ("c_formula", "geometric_pop", "dh_identity", "monotone_mean", "sigma_tail",
          "main_inequality", "first_jump_split", "counting_inequality", "decomposition")


def _result(name, passed, observed, expected, band, **extra) -> dict:
    return {"check": name, "pass": bool(passed), "observed": observed, "expected": expected,
            "band": band, **extra}


def _quenched(source) -> Environment:
    return source if isinstance(source, Environment) else Environment(source)


def check_c_formula(env: Environment, L: int = 1, replicas: int = 100_000, seed: int = 0,
                    x0: int = 0, workers: int = 1) -> dict:
    """Frequency of a split before the first move and before 1/L, against the closed form."""
    xi0 = env.rate_at(x0)
    p, se, branch = stats.split_first_frequency(env, L, replicas, seed=seed, x0=x0, workers=workers)
    expected = stats.closed_form_c(xi0, L)
    return _result("c_formula", abs(p - expected) <= 3 * se, p, expected, 3 * se,
                   stderr=se, xi0=xi0, L=L, replicas=replicas)


def check_geometric_pop(rate: float = 0.5, t: float = 4.0, replicas: int = 10_000, seed: int = 0,
                        workers: int = 1, cap: int = 10**8) -> dict:
    env = Environment(EnvironmentSpec.constant(rate))
    out = map_replicas(RecordTask(env, 0, np.array([t]), t, 1, seed, seeds.STAGE_VERIFY, cap),
                       replicas, workers)
    pop = out["pop"]
    m, se = stats.mean_stderr(pop)
    expected = math.exp(rate * t)
    chi2, pval, cells = stats.geometric_gof(pop, math.exp(-rate * t))
    return _result("geometric_pop", abs(m - expected) <= 3 * se and pval > 0.01, m, expected, 3 * se,
                   stderr=se, chi2=chi2, chi2_p=pval, cells=cells, rate=rate, t=t, replicas=replicas)


def check_dh_identity(env: Environment, t: float = 5.0, L: int = 1, samples: int = 10_000,
                      seed: int = 0, workers: int = 1, cap: int = 10**8) -> dict:
    rep = stats.dekking_host_identity(env, t, L, samples, seed=seed, workers=workers, cap=cap)
    return _result("dh_identity", rep.ks.pvalue > 0.01, rep.ks.pvalue, "> 0.01", 0.01,
                   ks_statistic=rep.ks.statistic, samples=samples, attempts=rep.attempts,
                   mean_conditional=rep.mean_conditional, mean_max_of_two=rep.mean_max_of_two, t=t)


def check_monotone_mean(env: Environment, T: float = 10.0, L: int = 1, eta: float = 0.0,
                        replicas: int = 5000, seed: int = 0, workers: int = 1, cap: int = 10**8,
                        series: stats.MeanSeries = None) -> dict:
    if series is None:
        series = stats.estimate_mean_series(env, L, eta, T, replicas, seed=seed, cap=cap, workers=workers)
    bad = stats.monotone_violations(series, 2.0)
    worst = max((float(series.mean[i] - series.mean[i + 1]) for i in range(len(series.grid) - 1)),
                default=0.0)
    return _result("monotone_mean", not bad, worst, "no drop beyond 2 combined stderr", 2.0,
                   violations=bad, replicas=series.replicas, mean=series.mean.tolist(),
                   stderr=series.stderr.tolist())


def check_sigma_tail(source, y: int = 1, z=(1, 2, 3, 4, 5, 6), replicas: int = 10_000, seed: int = 0,
                     workers: int = 1, cap: int = 10**8) -> dict:
    curve = stats.estimate_sigma_tail(source, y, np.asarray(z, float), replicas, seed=seed,
                                      workers=workers, cap=cap)
    ok = curve.C1_hat > 0 and curve.r2 >= 0.9 and bool(np.all(np.diff(curve.survival) <= 0))
    return _result("sigma_tail", ok, {"C1_hat": curve.C1_hat, "r2": curve.r2},
                   {"C1_hat": "> 0", "r2": ">= 0.9"}, 0.9, survival=curve.survival.tolist(),
                   z=list(map(float, z)), y=y, replicas=replicas, fit_points=curve.fit_points)


def check_main_inequality(source, times=(2, 4, 6), L: int = 1, replicas: int = 2000, seed: int = 0,
                          workers: int = 1, cap: int = 10**8) -> dict:
    reports = [stats.verify_main_inequality(source, float(t), L, replicas, seed=seed,
                                            workers=workers, cap=cap) for t in times]
    return _result("main_inequality", all(r.holds for r in reports),
                   [r.slack for r in reports], ">= -3 stderr", [3 * r.stderr for r in reports],
                   reports=[r.to_dict() for r in reports])


def check_first_jump_split(source, t: float = 4.0, L: int = 1, replicas: int = 10_000, seed: int = 0,
                           workers: int = 1, cap: int = 10**8) -> dict:
    r = stats.verify_first_jump_split(source, t, L, replicas, seed=seed, workers=workers, cap=cap)
    return _result("first_jump_split", r.holds and r.cutoff_holds,
                   {"diff": r.diff, "cutoff_term": r.cutoff_term}, {"diff": 0.0, "cutoff_term": 0.0},
                   {"diff": 3 * r.diff_stderr, "cutoff_term": 3 * r.cutoff_stderr}, report=r.to_dict())


def handcrafted_series(n: int = 41, seed: int = 0, L: int = 1) -> stats.MeanSeries:
    """Non-decreasing series with occasional large jumps, for exercising the selections."""
    g = np.random.Generator(np.random.PCG64(seeds.seed_sequence(seed, seeds.STAGE_VERIFY)))
    inc = g.exponential(1.0, n - 1) * np.where(g.random(n - 1) < 0.2, 8.0, 1.0)
    mean = np.concatenate([[0.0], np.cumsum(inc)])
    return stats.MeanSeries(L=L, eta=0.0, grid=np.arange(n) / L, mean=mean, stderr=np.zeros(n),
                            mode="handcrafted", env={}, replicas=0)


def check_counting_inequality(series: stats.MeanSeries = None, params: select.SelectionParams = None,
                              js=(1, 2, 3, 4, 5), seed: int = 0) -> dict:
    if series is None:
        series = handcrafted_series(seed=seed)
    if params is None:
        params = select.SelectionParams(0.5, series.L, series.eta, 1.0, 0.4)
    rows = [select.counting_check(series, j, params) for j in js if j < len(series.grid)]
    member_ok = True
    for sel in ([select.select_oben(series, params), select.build_B(series, params)]
                + [select.select_fixed_j(series, j, params) for j in js if j < len(series.grid)]):
        member_ok &= bool(np.array_equal(sel.mask, select.brute_force_membership(series, sel)))
    return _result("counting_inequality", all(r["holds"] for r in rows) and member_ok,
                   max(r["max_excess"] for r in rows), "<= 0", 0, rows=rows, membership_exact=member_ok)


def check_decomposition(source, t: float = 6.0, y: int = 1, L: int = 1, eta: float = 0.0,
                        replicas: int = 2000, seed: int = 0, workers: int = 1, cap: int = 10**8) -> dict:
    r = diagnose.verify_decomposition(source, t, replicas, y=y, L=L, eta=eta, seed=seed,
                                      workers=workers, cap=cap)
    return _result("decomposition", r.holds and r.bins_nonnegative, r.lhs, {"rhs": r.rhs},
                   3 * r.diff_stderr, report=r.to_dict())


def run_check(name: str, cfg) -> dict:
    """Run one named check with parameters taken from an :class:`ExperimentConfig`."""
    d = cfg.doc
    seed = cfg.seed("estimate_seed")
    n = cfg.replicas("verify")
    common = {"workers": d["workers"]}
    cap = int(d["population_cap"])
    env = _quenched(cfg.source)
    if name == "c_formula":
        return check_c_formula(env, d["L"], max(n, 100_000), seed, d["x0"], **common)
    if name == "geometric_pop":
        return check_geometric_pop(cfg.env_spec.ei, min(4.0, d["T"]), max(n, 10_000), seed, cap=cap, **common)
    if name == "dh_identity":
        return check_dh_identity(env, min(5.0, d["T"]), d["L"], max(n, 10_000), seed, cap=cap, **common)
    if name == "monotone_mean":
        return check_monotone_mean(env, d["T"], d["L"], d["eta"], max(n, 5000), seed, cap=cap, **common)
    if name == "sigma_tail":
        return check_sigma_tail(cfg.source, d["sigma"]["y"], d["sigma"]["z"], cfg.replicas("sigma"),
                                seed, cap=cap, **common)
    if name == "main_inequality":
        return check_main_inequality(cfg.source, d["verify_times"], d["L"], n, seed, cap=cap, **common)
    if name == "first_jump_split":
        return check_first_jump_split(cfg.source, min(4.0, d["T"]), d["L"], n, seed, cap=cap, **common)
    if name == "counting_inequality":
        return check_counting_inequality(seed=seed)
    if name == "decomposition":
        return check_decomposition(cfg.source, min(6.0, d["T"]), d["sigma"]["y"], d["L"], d["eta"], n,
                                   seed, cap=cap, **common)
    raise KeyError(f"unknown check {name!r}; choose from {', '.join(CHECKS)}")
