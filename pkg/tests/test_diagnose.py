import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from brwre.diagnose import (TightnessReport, centered_samples, nearest_rank_quantiles, tightness_report,
                            verify_decomposition, verify_sideterm_bounded)
from brwre.env import Environment, EnvironmentSpec
from brwre.select import SelectionParams, SelectionResult
from brwre.stats import estimate_mean_series

from conftest import stream


def _mask_sel(series, mask):
    p = SelectionParams(0.5, series.L, series.eta, 1.0, 0.5)
    return SelectionResult("final_intersection", series.grid, np.asarray(mask, bool), p)


def test_nearest_rank():
    x = np.arange(1, 101)
    assert nearest_rank_quantiles(x).tolist() == [5, 25, 50, 75, 95]
    assert nearest_rank_quantiles([3.0], [0.05, 0.95]).tolist() == [3.0, 3.0]


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=200), st.floats(-1e3, 1e3))
def test_quantiles_ordered_and_location_free(x, shift):
    q = nearest_rank_quantiles(x)
    assert np.all(np.diff(q) >= 0)
    q2 = nearest_rank_quantiles(np.asarray(x) + shift)
    # nearest rank picks sample points, so the spread moves only by rounding
    assert (q2[4] - q2[0]) == pytest.approx(q[4] - q[0], abs=1e-6 * (1 + abs(shift)))


def test_spread_zero_at_time_zero(preset_env):
    s = estimate_mean_series(preset_env, 1, 0.0, 0.0, 10, seed=1)
    rep = tightness_report(preset_env, _mask_sel(s, [True]), s, 100, seed=2)
    assert rep.spread.tolist() == [0.0] and rep.passes_growth_proxy and rep.passes_subset


def test_subset_invariant_and_recentering(preset_env):
    s = estimate_mean_series(preset_env, 1, 0.0, 5.0, 200, seed=3)
    rng = stream(3)
    rep, X = tightness_report(preset_env, _mask_sel(s, rng.random(6) < 0.5), s, 300, seed=4,
                              return_samples=True)
    assert rep.max_spread_selected <= rep.max_spread_full or not rep.selected.any()
    assert np.all(np.diff(rep.quantiles, axis=0) >= 0)
    shifted = nearest_rank_quantiles(X + rng.normal(size=6)[None, :] * 10)
    assert np.allclose(shifted[4] - shifted[0], rep.spread)


def test_tightness_preconditions(preset_env):
    s = estimate_mean_series(preset_env, 1, 0.0, 2.0, 20, seed=5)
    sel = _mask_sel(s, [True, True, True])
    with pytest.raises(ValueError):
        tightness_report(preset_env, sel, s, 99, seed=6)
    with pytest.raises(ValueError):
        tightness_report(preset_env, sel, s, 100, seed=5)


def test_environment_centering_groups(preset_spec):
    s = estimate_mean_series(preset_spec, 1, 0.0, 3.0, 50, seed=7)
    X, used = centered_samples(preset_spec, s, 100, seed=8, group=10)
    assert used == "environment" and X.shape == (100, 4)
    assert np.all(X[:, 0] == 0)
    with pytest.raises(ValueError):
        centered_samples(preset_spec, s, 105, seed=8, group=10)
    with pytest.raises(ValueError):
        centered_samples(Environment(preset_spec), s, 100, seed=8, centering="environment")


def test_report_outputs(tmp_path, preset_env):
    s = estimate_mean_series(preset_env, 1, 0.0, 4.0, 50, seed=9)
    rep = tightness_report(preset_env, _mask_sel(s, [0, 1, 0, 1, 1]), s, 100, seed=10)
    rep.to_csv(tmp_path / "t.csv")
    rows = (tmp_path / "t.csv").read_text().splitlines()
    assert rows[0].startswith("t,q05,q25,q50,q75,q95,spread") and len(rows) == 6
    rep.save_summary(tmp_path / "t.json")
    doc = json.loads((tmp_path / "t.json").read_text())
    assert {"max_spread_selected", "max_spread_full", "ratio"} <= set(doc)
    assert doc["times"] == [1.0, 3.0, 4.0]


def test_ratio_conventions():
    q = np.zeros((5, 3))
    rep = TightnessReport(np.arange(3.0), q, np.array([True, True, False]), 100, "series")
    assert rep.ratio == 1.0 and rep.passes_growth_proxy


def _homogeneous_brw_max(rate, t, n, g):
    """Standalone particle-list simulation of the homogeneous branching walk."""
    out = np.empty(n, np.int64)
    for r in range(n):
        pos = [0]
        clock = 0.0
        while True:
            clock += g.exponential(1.0 / ((1.0 + rate) * len(pos)))
            if clock > t:
                break
            i = g.integers(len(pos))
            if g.random() < rate / (1.0 + rate):
                pos.append(pos[i])
            else:
                pos[i] += 1 if g.random() < 0.5 else -1
        out[r] = max(pos)
    return out


def test_constant_env_matches_homogeneous_walk():
    env = Environment(EnvironmentSpec.constant(0.5))
    s = estimate_mean_series(env, 1, 0.0, 6.0, 1000, seed=11)
    X, _ = centered_samples(env, s, 1500, seed=12)
    ref = _homogeneous_brw_max(0.5, 6.0, 1500, stream(12)).astype(float)
    assert sps.ks_2samp(X[:, -1], ref - s.mean[-1]).pvalue > 0.01


# --- decomposition ------------------------------------------------------------------

def test_decomposition_at_zero(preset_env):
    r = verify_decomposition(preset_env, 0.0, 200, seed=13)
    assert r.lhs == 0.0 and r.holds


def test_decomposition_quenched(preset_env):
    r = verify_decomposition(preset_env, 4.0, 1000, seed=14)
    assert r.holds and r.bins_nonnegative and r.monotone
    assert r.lhs <= r.rhs + 3 * r.diff_stderr
    for term, se in zip(r.bin_terms, r.bin_stderr):
        assert term >= -3 * se
    d = r.to_dict()
    json.dumps(d)


def test_decomposition_errors(preset_env):
    with pytest.raises(ValueError):
        verify_decomposition(preset_env, 2.5, 10)
    with pytest.raises(ValueError):
        verify_decomposition(preset_env, 2.0, 10, y=0)


# --- side term ----------------------------------------------------------------------

@pytest.mark.parametrize("y", [1, -1])
def test_sideterm_time_zero(preset_env, y):
    r = verify_sideterm_bounded(preset_env, 2.0, 2000, y=y, seed=15)
    # at time 0 every replica has sigma > 0, so the value is (x0 - y) P[tau = tau_m]
    assert r.value[0] == pytest.approx((0 - y) * r.p_move)


def test_sideterm_constant_env_decays():
    env = Environment(EnvironmentSpec.constant(1.0))
    r = verify_sideterm_bounded(env, 8.0, 2000, seed=16)
    assert r.trend_ok
    i6, i8 = 6, 8
    assert max(r.value[i8], 0) <= max(r.value[i6], 0) + 3 * math.hypot(r.stderr[i6], r.stderr[i8])
    assert np.all(np.isfinite(r.running_max))
