import numpy as np
import pytest

from ttldelay.distributions import Coxian, ph_moment
from ttldelay.errors import FitError
from ttldelay.trace_pipeline import (
    canonical_coxian,
    fit_ph_em,
    interarrivals,
    remove_outliers,
    select_phases,
)


def monotone(trace, slack=1e-9):
    return all(b >= a - slack for a, b in zip(trace, trace[1:]))


class TestInterarrivals:
    def test_simple_differences(self):
        np.testing.assert_allclose(interarrivals([0, 1, 3]), [1, 2])

    def test_zero_gaps_kept(self):
        np.testing.assert_allclose(interarrivals([0, 0, 1]), [0, 1])

    def test_unsorted_rejected(self):
        with pytest.raises(ValueError):
            interarrivals([0, 2, 1])

    def test_poisson_mean(self, rng):
        t = np.cumsum(rng.exponential(0.5, 10_000))
        gaps = interarrivals(np.concatenate([[0.0], t]))
        assert gaps.mean() == pytest.approx(0.5, abs=0.02)


class TestRemoveOutliers:
    def test_constant_samples_unchanged(self):
        s = np.full(40, 2.5)
        assert len(remove_outliers(s)) == 40

    def test_huge_sample_removed(self, rng):
        s = np.concatenate([rng.exponential(1.0, 999), [1e6]])
        filtered = remove_outliers(s)
        assert filtered.max() < 1e5

    def test_infinite_cutoff_keeps_all(self, rng):
        s = rng.exponential(1.0, 500)
        assert len(remove_outliers(s, cutoff=np.inf)) == 500

    def test_zeros_offset(self, rng):
        s = np.concatenate([[0.0, 0.0], rng.exponential(1.0, 200)])
        filtered = remove_outliers(s)
        assert np.all(filtered > 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            remove_outliers([])


class TestFitPhEm:
    def test_exponential_rate_recovered(self, rng):
        samples = rng.exponential(0.5, 2500)
        report = fit_ph_em(samples, 1)
        assert report.fitted.rates[0] == pytest.approx(2.0, rel=0.05)
        assert monotone(report.log_likelihood_trace)
        assert report.fitted_mean == pytest.approx(report.empirical_mean, rel=0.05)

    def test_erlang_data_nested_likelihood(self, rng):
        samples = rng.gamma(3.0, 1.0 / 3.0, 1200)
        r3 = fit_ph_em(samples, 3, max_iters=150)
        r1 = fit_ph_em(samples, 1)
        assert r3.log_likelihood >= r1.log_likelihood
        assert monotone(r3.log_likelihood_trace)
        assert r3.fitted_mean == pytest.approx(r3.empirical_mean, rel=0.05)

    def test_rejects_bad_input(self):
        with pytest.raises(FitError):
            fit_ph_em([], 2)
        with pytest.raises(FitError):
            fit_ph_em([1.0, -2.0], 2)
        with pytest.raises(FitError):
            fit_ph_em([1.0, 2.0], 0)

    def test_monotone_on_corpus(self, rng):
        corpus = {
            "exponential": rng.exponential(1.0, 800),
            "erlang": rng.gamma(3.0, 0.5, 800),
            "bimodal": np.concatenate(
                [rng.exponential(0.2, 400), 4.0 + rng.exponential(0.3, 400)]
            ),
            "lognormal": rng.lognormal(0.0, 0.8, 800),
        }
        for name, samples in corpus.items():
            report = fit_ph_em(samples, 2, max_iters=120)
            assert monotone(report.log_likelihood_trace), name
            assert report.fitted_mean == pytest.approx(report.empirical_mean, rel=0.05)


class TestSelectPhases:
    def test_exponential_picks_one_phase(self, rng):
        samples = rng.exponential(1.0, 1200)
        best = select_phases(samples, range(1, 4), max_iters=120)
        assert best.phases == 1
        assert best.aic >= 2 * 1 - 2 * best.log_likelihood - 1e-9

    def test_bimodal_needs_multiple_phases(self, rng):
        samples = np.concatenate(
            [rng.exponential(0.1, 600), 5.0 + rng.exponential(0.2, 600)]
        )
        best = select_phases(samples, range(1, 4), max_iters=120)
        assert best.phases >= 2
        single = fit_ph_em(samples, 1)
        assert best.log_likelihood > single.log_likelihood + 10

    def test_empty_range_rejected(self):
        with pytest.raises(FitError):
            select_phases([1.0, 2.0], [])


class TestCanonicalForm:
    def test_reordering_preserves_distribution(self):
        cox = Coxian((1.0, 5.0, 2.0), (0.7, 0.4))
        canon = canonical_coxian(cox)
        rates = canon.rates
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        a1, s1 = cox.ph()
        a2, s2 = canon.ph()
        for k in range(1, 6):
            assert ph_moment(a2, s2, k) == pytest.approx(
                ph_moment(a1, s1, k), rel=1e-9
            )

    def test_already_sorted_untouched(self):
        cox = Coxian((5.0, 2.0), (0.5,))
        assert canonical_coxian(cox).rates == (5.0, 2.0)

    def test_fit_reports_ordered_rates(self, rng):
        samples = np.concatenate(
            [rng.exponential(0.2, 500), 3.0 + rng.exponential(0.5, 500)]
        )
        report = fit_ph_em(samples, 3, max_iters=60)
        rates = report.fitted.rates
        assert all(a >= b - 1e-12 for a, b in zip(rates, rates[1:]))
