"""Stage functions behind the command line: each reads a config and writes artifacts."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as seeds
from . import diagnose, select, stats
from .checks import run_check
from .engine import HIT_NONE, HIT_TRACK, PopulationCapExceeded, TrajectoryRecord, simulate
from .parallel import map_replicas
from .replicas import env_for

SCHEMA = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def clean(x):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(x, dict):
        return {str(k): clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def write_json(path: Path, doc) -> None:
    Path(path).write_text(json.dumps(clean(doc), sort_keys=True, indent=2) + "\n")


def archived_config(cfg) -> dict:
    """The config as archived with artifacts; execution-only keys are dropped."""
    return {k: v for k, v in cfg.doc.items() if k not in ("workers", "output_dir")}


# --- simulate ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimulateTask:
    source: object
    x0: int
    T: float
    L: int
    eta: float
    seed: int
    cap: int

    def __call__(self, start, stop):
        from .engine import time_grid
        grid = time_grid(self.L, self.eta, self.T)
        lines, failed = [], []
        for k in range(start, stop):
            raw = simulate(self.x0, self.T, grid, env_for(self.source, k),
                           seeds.replica_rng(self.seed, seeds.STAGE_SIMULATE, k), L=self.L,
                           cap=self.cap, hit_mode=HIT_TRACK if self.x0 != 0 else HIT_NONE)
            rec = TrajectoryRecord.from_raw(raw, self.T, replica=k)
            lines.append(json.dumps(clean(rec.to_dict())))
            failed.append(raw.failed)
        return {"line": np.array(lines, dtype=object), "failed": np.array(failed, bool)}


def cmd_simulate(cfg, out: Path) -> dict:
    d = cfg.doc
    res = map_replicas(SimulateTask(cfg.source, int(d["x0"]), float(d["T"]), int(d["L"]), float(d["eta"]),
                                    cfg.seed("estimate_seed"), int(d["population_cap"])),
                       cfg.replicas("simulate"), d["workers"])
    lines, failed = res["line"], res["failed"]
    bad = np.flatnonzero(failed)
    stop = int(bad[0]) + 1 if bad.size else len(lines)
    with open(out / "records.jsonl", "w") as fh:
        for line in lines[:stop]:
            fh.write(line + "\n")
    if bad.size:
        raise PopulationCapExceeded(
            f"replica {int(bad[0])}: population would exceed cap {d['population_cap']}", replica=int(bad[0]))
    return {"records": stop}


# --- stages -------------------------------------------------------------------------------

def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def stage_means(cfg, out: Path) -> stats.MeanSeries:
    d = cfg.doc
    series = _stage("estimate-means", stats.estimate_mean_series, cfg.source, int(d["L"]), float(d["eta"]),
                    float(d["T"]), cfg.replicas("estimate"), seed=cfg.seed("estimate_seed"),
                    x0=int(d["x0"]), cap=int(d["population_cap"]), workers=d["workers"])
    series.to_csv(out / "means.csv")
    series.save_json(out / "means.json")
    return series


def stage_sigma(cfg, out: Path) -> stats.SurvivalCurve:
    d = cfg.doc
    curve = _stage("sigma-tail", stats.estimate_sigma_tail, cfg.source, int(d["sigma"]["y"]),
                   np.asarray(d["sigma"]["z"], float), cfg.replicas("sigma"), seed=cfg.seed("estimate_seed"),
                   cap=int(d["population_cap"]), workers=d["workers"])
    curve.to_csv(out / "survival.csv")
    write_json(out / "survival.json", {"schema": SCHEMA, **curve.to_dict()})
    return curve


def load_series(out: Path) -> stats.MeanSeries:
    return stats.MeanSeries.load_json(out / "means.json")


def load_C1(out: Path) -> float:
    doc = json.loads((out / "survival.json").read_text())
    return math.nan if doc["C1_hat"] is None else float(doc["C1_hat"])


@dataclass
class Selections:
    params: select.SelectionParams
    oben: select.SelectionResult
    B: select.SelectionResult
    final: select.SelectionResult
    delta_B: float


def stage_select(cfg, series: stats.MeanSeries, C1: float, out: Path) -> Selections:
    def work():
        d = cfg.doc
        if not C1 > 0:
            raise ValueError(f"fitted tail rate must be positive, got {C1}")
        half = float(d["delta"]) / 2
        xs = stats.xstar_hat(series, float(d["xstar_factor"]))
        params = select.SelectionParams(half, int(d["L"]), float(d["eta"]), xs, C1)
        delta_B = select.density_delta(half, C1, params.L) if d["b_delta"] == "density" else half
        oben = select.select_oben(series, params)
        B = select.build_B(series, params.with_delta(delta_B))
        final = select.intersect(oben, B, params.with_delta(float(d["delta"])))
        return Selections(params, oben, B, final, delta_B)

    sel = _stage("select", work)
    final = sel.final
    final.save_json(out / "selection.json")
    final.to_csv(out / "selection.csv")
    sel.oben.save_json(out / "selection_oben.json")
    sel.oben.to_csv(out / "selection_oben.csv")
    sel.B.save_json(out / "selection_B.json")
    sel.B.to_csv(out / "selection_B.csv")
    return sel


def load_selection(out: Path, series: stats.MeanSeries) -> select.SelectionResult:
    doc = json.loads((out / "selection.json").read_text())
    p = doc["params"]
    params = select.SelectionParams(p["delta"], p["L"], p["eta"], p["x_star"],
                                    math.nan if p["C1"] is None else p["C1"])
    chosen = set(doc["selected"])
    mask = np.array([float(t) in chosen for t in series.grid])
    return select.SelectionResult("final_intersection", series.grid, mask, params)


def stage_tightness(cfg, sel: select.SelectionResult, series: stats.MeanSeries, out: Path):
    d = cfg.doc
    t = d["tightness"]
    rep = _stage("tightness", diagnose.tightness_report, cfg.source, sel, series, cfg.replicas("diagnose"),
                 seed=cfg.seed("diagnose_seed"), cap=int(d["population_cap"]), workers=d["workers"],
                 multiplier=float(t["multiplier"]), centering=t["centering"], group=int(t["group"]))
    rep.to_csv(out / "tightness.csv")
    rep.save_summary(out / "tightness.json")
    return rep


def cmd_pipeline(cfg, out: Path) -> dict:
    d = cfg.doc
    write_json(out / "config.json", archived_config(cfg))
    series = stage_means(cfg, out)
    curve = stage_sigma(cfg, out)
    sel = stage_select(cfg, series, curve.C1_hat, out)
    final = sel.final
    density = None
    if final.mask.any():
        density = select.density_report(final)
    rep = stage_tightness(cfg, final, series, out)
    L = int(d["L"])
    delta = float(d["delta"])
    mains = [_stage("main-inequality", stats.verify_main_inequality, cfg.source, float(t), L,
                    cfg.replicas("verify"), seed=cfg.seed("diagnose_seed"), x0=int(d["x0"]),
                    cap=int(d["population_cap"]), workers=d["workers"]) for t in d["verify_times"]]
    bound = (1 + delta) / L + 0.1 / L
    summary = {
        "schema": SCHEMA,
        "mode": d["mode"],
        "environment": cfg.env_spec.to_dict(),
        "family": cfg.env_spec.family,
        "x_star_hat": sel.params.x_star,
        "C1_hat": curve.C1_hat,
        "C1_r2": curve.r2,
        "delta": delta,
        "delta_oben": sel.params.delta,
        "delta_B": sel.delta_B,
        "density_condition_B": sel.params.with_delta(sel.delta_B).density_condition(),
        "selected_oben": sel.oben.selected,
        "selected_B": sel.B.selected,
        "selected_final": final.selected,
        "K_n_final": final.K,
        "density_tail_max": None if density is None else density.tail_max,
        "density_bound": bound,
        "density_pass": density is not None and density.tail_max <= bound,
        "tightness": rep.summary(),
        "main_inequality": [{"t": m.t, "lhs": m.lhs, "rhs": m.rhs, "slack": m.slack, "stderr": m.stderr,
                             "holds": m.holds} for m in mains],
    }
    summary = clean(summary)
    write_json(out / "summary.json", summary)
    return summary


def cmd_verify(cfg, name: str, out: Path) -> dict:
    res = run_check(name, cfg)
    write_json(out / f"verify_{name}.json", {"schema": SCHEMA, **res})
    return res
