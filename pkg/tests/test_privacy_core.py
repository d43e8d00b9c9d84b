import math

import pytest
from scipy import stats

from models.errors import PrivacyDomainError
from models.privacy import GaussianMechanismSpec, GdpParameter
from utils.privacy_core import calibrate_gaussian_sigma, compose_gaussians, gdp_delta, gdp_epsilon

# (epsilon, sigma) for 100 full-batch steps at delta = 1e-5
FULL_BATCH_TABLE = [
    (0.1, 339), (0.2, 171), (0.5, 72), (1, 38), (2, 21), (3, 14), (4, 11), (6, 8), (8, 7),
]


class TestGdpDelta:
    def test_zero_epsilon_is_total_variation(self):
        expected = stats.norm.cdf(0.5) - stats.norm.cdf(-0.5)
        assert gdp_delta(1.0, 0.0) == pytest.approx(expected, rel=1e-12)
        assert gdp_delta(1.0, 0.0) == pytest.approx(0.3829, abs=1e-4)

    def test_accepts_gdp_parameter(self):
        assert gdp_delta(GdpParameter(0.7), 1.0) == gdp_delta(0.7, 1.0)

    def test_infinite_epsilon(self):
        assert gdp_delta(2.0, math.inf) == 0.0

    def test_decreasing_in_epsilon(self):
        values = [gdp_delta(1.5, e) for e in (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_increasing_in_mu(self):
        values = [gdp_delta(mu, 1.0) for mu in (0.1, 0.5, 1.0, 2.0, 4.0)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_small_delta_keeps_precision(self):
        # both terms nearly cancel; the result must stay positive and tiny
        value = gdp_delta(10 / 38, 1.0)
        assert 0 < value < 1e-5

    @pytest.mark.parametrize('mu, epsilon', [(0.0, 1.0), (-1.0, 1.0), (1.0, -0.1), (math.inf, 1.0)])
    def test_domain_errors(self, mu, epsilon):
        with pytest.raises(PrivacyDomainError):
            gdp_delta(mu, epsilon)


class TestGdpEpsilon:
    @pytest.mark.parametrize('mu', [0.1, 1.0, 3.0])
    @pytest.mark.parametrize('epsilon', [0.5, 1.0, 8.0])
    def test_inverts_gdp_delta(self, mu, epsilon):
        delta = gdp_delta(mu, epsilon)
        if delta == 0.0:
            pytest.skip("delta underflows at this (mu, epsilon)")
        assert gdp_epsilon(mu, delta) == pytest.approx(epsilon, abs=1e-6)

    def test_zero_when_delta_already_met(self):
        assert gdp_epsilon(0.01, 0.5) == 0.0

    def test_result_meets_delta(self):
        epsilon = gdp_epsilon(1.2, 1e-5)
        assert gdp_delta(1.2, epsilon) <= 1e-5

    @pytest.mark.parametrize('delta', [0.0, 1.0, -1e-5])
    def test_rejects_bad_delta(self, delta):
        with pytest.raises(PrivacyDomainError):
            gdp_epsilon(1.0, delta)


class TestComposeGaussians:
    def test_mean_release_with_full_batch_steps(self):
        mu = compose_gaussians([GaussianMechanismSpec(71, 1), GaussianMechanismSpec(43, 100)])
        assert mu.mu == pytest.approx(math.sqrt(1 / 71 ** 2 + 100 / 43 ** 2), rel=1e-12)
        assert mu.mu == pytest.approx(0.23298, abs=1e-5)

    def test_repeated_mechanism(self):
        assert compose_gaussians([GaussianMechanismSpec(7, 100)]).mu == pytest.approx(10 / 7, rel=1e-12)

    def test_order_does_not_matter(self):
        a = [GaussianMechanismSpec(3, 4), GaussianMechanismSpec(11, 1), GaussianMechanismSpec(0.9, 2)]
        assert compose_gaussians(a).mu == pytest.approx(compose_gaussians(a[::-1]).mu, rel=1e-15)

    def test_empty_list(self):
        with pytest.raises(PrivacyDomainError):
            compose_gaussians([])


class TestFullBatchTables:
    @pytest.mark.parametrize('epsilon, sigma', FULL_BATCH_TABLE)
    def test_table_sigma_meets_budget(self, epsilon, sigma):
        assert gdp_delta(10 / sigma, epsilon) <= 1e-5

    @pytest.mark.parametrize('epsilon, sigma', FULL_BATCH_TABLE)
    def test_grid_calibration_never_exceeds_table(self, epsilon, sigma):
        tight = math.ceil(calibrate_gaussian_sigma(epsilon, 1e-5, count=100) * 10 - 1e-9) / 10
        assert tight <= sigma
        assert gdp_delta(10 / tight, epsilon) <= 1e-5 * (1 + 1e-9)

    def test_table_rows_tight_on_the_grid(self):
        # most rows carry slack above the 0.1-grid optimum; only eps=3 is tight
        tight = [(epsilon, sigma) for epsilon, sigma in FULL_BATCH_TABLE
                 if gdp_delta(10 / (sigma - 0.1), epsilon) > 1e-5]
        assert tight == [(3, 14)]

    def test_mean_release_composition_closes_at_one(self):
        mu = compose_gaussians([GaussianMechanismSpec(71, 1), GaussianMechanismSpec(43, 100)])
        assert gdp_delta(mu, 1.0) <= 7.8e-7

    def test_mean_release_composition_closes_at_eight(self):
        mu = compose_gaussians([GaussianMechanismSpec(14, 1), GaussianMechanismSpec(9.33, 200)])
        assert gdp_delta(mu, 8.0) <= 7.8e-7


class TestCalibrateGaussianSigma:
    def test_calibrated_sigma_is_tight(self):
        sigma = calibrate_gaussian_sigma(1.0, 1e-5, count=100)
        assert gdp_delta(math.sqrt(100) / sigma, 1.0) <= 1e-5 * (1 + 1e-6)
        assert gdp_delta(math.sqrt(100) / (sigma * 0.999), 1.0) > 1e-5

    def test_scales_with_sqrt_count(self):
        single = calibrate_gaussian_sigma(2.0, 1e-5, count=1)
        assert calibrate_gaussian_sigma(2.0, 1e-5, count=25) == pytest.approx(5 * single, rel=1e-12)

    def test_rejects_zero_epsilon(self):
        with pytest.raises(PrivacyDomainError):
            calibrate_gaussian_sigma(0.0, 1e-5)
