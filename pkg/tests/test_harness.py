import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from copasmeta.errors import EmptyReportError
from copasmeta.harness import (
    GridOptions,
    ReplicateResult,
    compute_metrics,
    direction_for,
    effective_mechanism,
    emit_figure_data,
    row_mechanism,
    run_replicate,
    run_replicates,
    select_replicate,
    table1_csv,
)
from copasmeta.selection import CopasLatent, Significance, StandardizedLatent, calibrate_rate, significance_cutoff
from copasmeta.simulate import ScenarioConfig

SMALL_GRID = GridOptions(n_alpha=4, n_beta=3)


def result(theta, half=0.5, m=20, converged=True):
    return ReplicateResult(theta, theta - half, theta + half, m, converged)


class TestMetrics:
    @settings(max_examples=100)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=50), st.floats(-2, 2))
    def test_mse_identity(self, ests, truth):
        rep = compute_metrics([result(e) for e in ests], truth)
        err = np.array(ests) - truth
        assert rep.mse == pytest.approx(rep.bias**2 + np.var(err), abs=1e-12)

    @settings(max_examples=100)
    @given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.01, 2)), min_size=1, max_size=40))
    def test_cp_monotone_under_widening(self, rows):
        narrow = compute_metrics([result(t, h) for t, h in rows], 0.0)
        wide = compute_metrics([result(t, 2 * h) for t, h in rows], 0.0)
        assert wide.cp >= narrow.cp

    def test_failures_counted(self):
        rows = [result(0.1), result(-0.1), ReplicateResult(math.nan, math.nan, math.nan, 3, False, failure_kind="too_few_published")]
        rep = compute_metrics(rows, 0.0)
        assert rep.n_replicates_used == 2 and rep.n_failed == 1
        assert rep.m_bar == pytest.approx((20 + 20 + 3) / 3)
        assert rep.unreliable

    def test_empty(self):
        with pytest.raises(EmptyReportError):
            compute_metrics([], 0.0)
        with pytest.raises(EmptyReportError):
            compute_metrics([ReplicateResult(math.nan, math.nan, math.nan, 2, False)], 0.0)


class TestDirection:
    def test_copas_correlation_oriented_to_true_effect(self):
        scen = ScenarioConfig()
        assert direction_for(scen) == -1
        assert effective_mechanism(CopasLatent(0.9), scen).rho_sel == -0.9
        flipped = scen.with_(orientation="group0_minus_group1")
        assert effective_mechanism(CopasLatent(0.9), flipped).rho_sel == 0.9

    def test_rows(self):
        scen = ScenarioConfig()
        assert row_mechanism("significance", scen).direction == -1
        assert row_mechanism("standardized", scen).direction == -1
        with pytest.raises(ValueError):
            row_mechanism("trim_and_fill", scen)


class TestReplicates:
    scenario = ScenarioConfig(seed=11)

    def test_replicate_fields(self):
        r = run_replicate(self.scenario, CopasLatent(0.0, 0.2), SMALL_GRID, 0)
        assert r.converged and r.ci_low < r.theta_adj < r.ci_high
        assert 4 <= r.m_published <= 30

    def test_too_few_published(self):
        r = run_replicate(self.scenario.with_(m=4), Significance(0.05, 1.0, -1), SMALL_GRID, 0)
        assert not r.converged and r.failure_kind == "too_few_published"

    def test_populations_shared_across_mechanisms(self):
        a, _, _ = select_replicate(self.scenario, CopasLatent(0.0, 0.2), 3)
        b, _, _ = select_replicate(self.scenario, StandardizedLatent(0.2, -1), 3)
        assert np.array_equal(a.d, b.d)

    def test_parallel_matches_serial(self):
        mech = StandardizedLatent(0.2, -1)
        serial = run_replicates(self.scenario, mech, 6, SMALL_GRID, 1)
        parallel = run_replicates(self.scenario, mech, 6, SMALL_GRID, 3)
        assert serial == parallel

    def test_early_stop_matches_full_grid(self):
        mech = CopasLatent(0.0, 0.2)
        full = run_replicates(self.scenario, mech, 4, GridOptions(4, 3, early_stop=False))
        fast = run_replicates(self.scenario, mech, 4, GridOptions(4, 3, early_stop=True))
        assert [r.theta_adj for r in full] == [r.theta_adj for r in fast]

    @pytest.mark.slow
    def test_replicate_independence(self):
        # two halves of 1000 replicates agree within 4 combined MC SEs
        scen = ScenarioConfig(seed=2024)
        mech = calibrate_rate(CopasLatent(0.0), scen, pilot_replicates=100).spec
        results = run_replicates(scen, mech, 1000)
        a = compute_metrics(results[:500], scen.theta_true)
        b = compute_metrics(results[500:], scen.theta_true)
        assert abs(a.bias - b.bias) < 4 * math.hypot(a.mc_se_bias, b.mc_se_bias)


class TestFigureData:
    scenario = ScenarioConfig(sigma0_2=2.0, sigma1_2=3.0, seed=5)

    def test_standardized_shift(self):
        mech = calibrate_rate(StandardizedLatent(0.5, -1), self.scenario, pilot_replicates=30).spec
        data = emit_figure_data(self.scenario, mech, 60)
        z = -data.standardized  # oriented so the true effect is positive
        assert z[data.published].mean() > z[~data.published].mean()

    def test_significance_truncation(self):
        mech = Significance(0.05, 0.6, -1)
        data = emit_figure_data(self.scenario, mech, 60)
        assert not np.any(-data.standardized[~data.published] > significance_cutoff(0.05))

    def test_no_selection_indistinguishable(self):
        # a cutoff nobody reaches: elimination is a coin flip independent of the effect
        mech = Significance(1e-12, 0.5, -1)
        data = emit_figure_data(self.scenario, mech, 100)
        z, pub = data.standardized, data.published
        gap = z[pub].mean() - z[~pub].mean()
        se = math.sqrt(z[pub].var() / pub.sum() + z[~pub].var() / (~pub).sum())
        assert abs(gap) < 3 * se

    def test_bins_cover_and_sum(self):
        data = emit_figure_data(self.scenario, Significance(0.05, 0.5, -1), 20)
        assert data.count_published.sum() + data.count_eliminated.sum() == data.standardized.size
        assert np.allclose(np.diff(data.bin_edges), 0.25)
        assert data.bin_edges[0] <= data.standardized.min() and data.bin_edges[-1] >= data.standardized.max()
        assert data.raw_csv().count("\n") == data.standardized.size + 1


def test_table1_csv_format():
    from copasmeta.harness import CellResult, ScenarioReport

    rep = ScenarioReport(0.1, 0.01, 0.95, 20.7, 10, 0, 0.01)
    cell = CellResult(ScenarioConfig(), "copas_rho0", CopasLatent(0.0, 0.25), None, rep)
    bad = CellResult(ScenarioConfig(), "standardized", None, None, None, "infeasible")
    lines = table1_csv([cell, bad], 42).splitlines()
    assert lines[0] == "# master_seed=42"
    assert lines[1] == "sigma0_2,sigma1_2,rho01,mechanism,mech_param,mse,bias,cp,m_bar,n_failed"
    assert lines[2].startswith("0,0,0,copas_rho0,0.25,0.10000000000000001,")
    assert lines[3] == "0,0,0,standardized,,,,,,"
