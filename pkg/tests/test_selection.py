import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from copasmeta.errors import CalibrationInfeasibleError, DegenerateSpreadError, InvalidArgumentError
from copasmeta.selection import (
    CopasLatent,
    Significance,
    StandardizedLatent,
    apply_copas_selection,
    apply_mechanism,
    apply_significance_selection,
    apply_standardized_selection,
    calibrate_rate,
    draw_delta_correlated,
    mechanism_from_dict,
    mechanism_to_dict,
    publication_probabilities,
    significance_cutoff,
    solve_latent_params,
)
from copasmeta.simulate import Population, ScenarioConfig, simulate_population


def toy_population(rng, m=40):
    n = rng.integers(20, 400, size=(m, 2))
    se_true = np.sqrt(100 * (1 / n[:, 0] + 1 / n[:, 1]))
    eps = rng.normal(0, se_true)
    d = -0.5 + eps
    s = se_true * rng.uniform(0.9, 1.1, m)
    return Population(n[:, 0], n[:, 1], d, s, eps, se_true)


class TestLatentParams:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            q5 = rng.uniform(-5, 5)
            q95 = q5 + rng.uniform(1e-3, 10)
            p0 = rng.uniform(1e-3, 0.5)
            lp = solve_latent_params(q5, q95, p0)
            worst = max(worst, abs(norm.cdf(lp.intercept + lp.slope * q5) - p0),
                        abs(norm.cdf(lp.intercept + lp.slope * q95) - 0.99))
        assert worst <= 1e-10

    def test_degenerate_spread(self):
        with pytest.raises(DegenerateSpreadError):
            solve_latent_params(1.0, 1.0, 0.3)
        with pytest.raises(DegenerateSpreadError):
            solve_latent_params(2.0, 1.0, 0.3)

    def test_p0_domain(self):
        with pytest.raises(InvalidArgumentError):
            solve_latent_params(0.0, 1.0, 0.0)

    def test_slope_positive(self):
        assert solve_latent_params(0.5, 3.0, 0.2).slope > 0


class TestMechanisms:
    def test_delta_correlation(self):
        rng = np.random.default_rng(1)
        eps = rng.normal(0, 2.0, 20000)
        delta = np.array([draw_delta_correlated(e, 2.0, 0.9, rng) for e in eps])
        assert np.corrcoef(eps, delta)[0, 1] == pytest.approx(0.9, abs=0.01)
        assert delta.std() == pytest.approx(1.0, abs=0.02)

    def test_copas_rho_zero_ignores_effect(self, rng):
        pop = toy_population(rng)
        flipped = Population(pop.n0, pop.n1, -pop.d, pop.s, -pop.eps_resid, pop.se_true)
        a = apply_copas_selection(pop, 0.0, 0.3, np.random.default_rng(9))
        b = apply_copas_selection(flipped, 0.0, 0.3, np.random.default_rng(9))
        assert np.array_equal(a.published, b.published)

    def test_copas_correlation_favours_positive_residuals(self):
        rng = np.random.default_rng(2)
        pos, neg = [], []
        for _ in range(200):
            pop = toy_population(rng)
            out = apply_copas_selection(pop, 0.9, 0.3, rng)
            pos.append(pop.eps_resid[out.published].mean())
            neg.append(pop.eps_resid[out.eliminated].mean() if out.eliminated.size else 0.0)
        assert np.mean(pos) > np.mean(neg)

    def test_significance_truncation(self, rng):
        pop = toy_population(rng, 200)
        out = apply_significance_selection(pop, 0.05, 1.0, -1, rng)
        assert np.all(-pop.standardized[out.published] > significance_cutoff(0.05))
        assert np.all(-pop.standardized[out.eliminated] <= significance_cutoff(0.05))
        everything = apply_significance_selection(pop, 0.05, 0.0, -1, rng)
        assert everything.rate == 1.0

    def test_standardized_monotone(self, rng):
        pop = toy_population(rng, 100)
        probs = publication_probabilities(StandardizedLatent(0.3, -1), pop)
        order = np.argsort(-pop.standardized)
        assert np.all(np.diff(probs[order]) >= -1e-15)

    def test_standardized_flat_fallback(self):
        pop = Population([10] * 5, [10] * 5, [1.0] * 5, [1.0] * 5, [0.0] * 5, [1.0] * 5)
        with pytest.warns(UserWarning):
            out = apply_standardized_selection(pop, 0.3, 1, np.random.default_rng(0))
        assert out.flat_fallback

    def test_published_and_eliminated_partition(self, rng):
        pop = toy_population(rng)
        for spec in (CopasLatent(0.9, 0.2), Significance(0.05, 0.5, -1), StandardizedLatent(0.2, -1)):
            out = apply_mechanism(spec, pop, rng)
            both = np.concatenate([out.published, out.eliminated])
            assert sorted(both.tolist()) == list(range(len(pop)))
            assert out.audit_csv(pop).count("\n") == len(pop) + 1

    def test_analytic_probabilities_match_frequencies(self, rng):
        pop = toy_population(rng, 30)
        spec = StandardizedLatent(0.3, -1)
        expected = publication_probabilities(spec, pop)
        counts = np.zeros(len(pop))
        n = 4000
        for _ in range(n):
            counts += apply_mechanism(spec, pop, rng).mask
        assert np.max(np.abs(counts / n - expected)) < 4 * math.sqrt(0.25 / n)

    def test_spec_validation(self):
        with pytest.raises(InvalidArgumentError):
            CopasLatent(1.5)
        with pytest.raises(InvalidArgumentError):
            Significance(0.05, 1.5, 1)
        with pytest.raises(InvalidArgumentError):
            StandardizedLatent(0.3, 0)

    @pytest.mark.parametrize("spec", [CopasLatent(0.9, 0.2), Significance(0.05, 0.4, -1), StandardizedLatent(0.1, 1)])
    def test_dict_round_trip(self, spec):
        assert mechanism_from_dict(mechanism_to_dict(spec)) == spec

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgumentError):
            mechanism_from_dict({"kind": "nope"})


class TestCalibration:
    scenario = ScenarioConfig(m=30, seed=99)

    @pytest.mark.parametrize("spec", [CopasLatent(0.0), Significance(0.05, 0.0, -1), StandardizedLatent(0.5, -1)])
    def test_reaches_target(self, spec):
        cal = calibrate_rate(spec, self.scenario, 0.7, 0.01, pilot_replicates=40)
        assert abs(cal.achieved_rate - 0.7) <= 0.01
        assert cal.achievable[0] <= 0.7 <= cal.achievable[1] + 0.01
        # the calibrated spec reproduces the pilot rate on the same pilots
        assert type(cal.spec) is type(spec)

    def test_infeasible_reports_range(self):
        with pytest.raises(CalibrationInfeasibleError) as err:
            calibrate_rate(StandardizedLatent(0.5, -1), self.scenario, 0.99, 0.005, pilot_replicates=20)
        lo, hi = err.value.achievable
        assert hi < 0.99

    def test_bad_target(self):
        with pytest.raises(InvalidArgumentError):
            calibrate_rate(CopasLatent(0.0), self.scenario, 0.0, 0.01, pilot_replicates=5)

    @settings(max_examples=10, deadline=None)
    @given(pi=st.floats(0.0, 1.0))
    def test_significance_rate_monotone_in_pi(self, pi):
        pop = simulate_population(self.scenario, np.random.default_rng(5))
        lo = apply_significance_selection(pop, 0.05, pi, -1, np.random.default_rng(1)).rate
        hi = apply_significance_selection(pop, 0.05, min(1.0, pi + 0.1), -1, np.random.default_rng(1)).rate
        assert hi <= lo
