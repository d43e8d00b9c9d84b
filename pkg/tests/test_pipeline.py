import dataclasses
import math

import numpy as np
import pytest

from models.data import PreprocConfig
from models.errors import BudgetExceededError, CalibrationError, ConfigError, NumericalFailureError
from models.privacy import GaussianMechanismSpec, PrivacyBudget
from models.training import LinearProbePlan, PhasePlan, RunReport
from utils import accountant, backprop, pipeline
from utils.persistence import ArtifactStore
from utils.privacy_core import compose_gaussians, gdp_delta, gdp_epsilon


@pytest.fixture
def encoder_params(toy_encoder):
    return backprop.init_params(toy_encoder, np.random.default_rng(21))


@pytest.fixture
def plan():
    return PhasePlan(budget=PrivacyBudget(50.0, 1e-5), q=0.5, T_total=4, N1=2, sigma=1.0,
                     lr_phase2=0.5, lr_phase3=0.2, ema_decay=0.9)


class TestRecommendN1:
    def test_small_epsilon_probes_only(self):
        assert pipeline.recommend_n1(0.1, 200) == 200

    def test_default_share(self):
        assert pipeline.recommend_n1(1.0, 875) == 96
        assert pipeline.recommend_n1(8.0, 200) == 22

    def test_at_least_one_step(self):
        assert pipeline.recommend_n1(2.0, 3) == 1


class TestAllocateBudget:
    def test_no_probe_steps_spend_nothing(self, coarse_accounting):
        plan = pipeline.allocate_budget(2.0, 1e-5, 0.1, 40, 0, coarse_accounting)
        assert plan.epsilon1_report == 0.0
        assert plan.N2 == 40

    def test_all_probe_steps_spend_the_budget(self, coarse_accounting):
        plan = pipeline.allocate_budget(2.0, 1e-5, 0.1, 40, 40, coarse_accounting)
        assert 0 < plan.epsilon1_report <= 2.0
        assert plan.epsilon1_report == accountant.epsilon_of(
            plan.phase2_config().mechanism(), 1e-5, coarse_accounting)

    def test_interior_split(self, coarse_accounting):
        plan = pipeline.allocate_budget(2.0, 1e-5, 0.1, 40, 10, coarse_accounting, lr_phase2=3.0)
        assert 0 < plan.epsilon1_fraction < 1
        assert plan.lr_phase2 == 3.0

    def test_n1_out_of_range(self, coarse_accounting):
        with pytest.raises(ConfigError):
            pipeline.allocate_budget(2.0, 1e-5, 0.1, 40, 41, coarse_accounting)

    @pytest.mark.slow
    def test_large_batch_schedule(self):
        plan = pipeline.allocate_budget(1.0, 1e-5, 4096 / 50000, 875, 96)
        assert plan.sigma == 9.3
        assert 0 < plan.epsilon1_fraction < 1


class TestEpsilon1Fractions:
    def test_fraction_grows_with_n1(self, coarse_accounting):
        rows = [
            pipeline.epsilon1_fraction_table([(2.0, 40, 3.0, 0.1)], n1, 1e-5, coarse_accounting)[0]
            for n1 in (0, 5, 20, 40)
        ]
        fractions = [r['fraction'] for r in rows]
        assert fractions[0] == 0.0
        assert fractions == sorted(fractions)
        assert rows[1]['epsilon1'] == pytest.approx(rows[1]['fraction'] * 2.0)

    def test_rejects_n1_above_schedule(self, coarse_accounting):
        with pytest.raises(ConfigError):
            pipeline.epsilon1_fraction_table([(2.0, 10, 3.0, 0.1)], 11, 1e-5, coarse_accounting)

    def test_fraction_curve_columns(self, coarse_accounting):
        rows = pipeline.fraction_curve([2.0, 4.0], 1e-5, 0.1, 30, n1=5, cfg=coarse_accounting)
        assert [r['epsilon'] for r in rows] == [2.0, 4.0]
        assert all(0 < r['fraction'] < 1 for r in rows)
        assert rows[0]['sigma'] > rows[1]['sigma']


class TestCalibrateLinearProbe:
    def test_mean_release_and_probe_close_within_budget(self):
        plan = pipeline.calibrate_linear_probe(1.0, 7.8e-7, 100, sigma1=71.0)
        mu = compose_gaussians([GaussianMechanismSpec(71.0, 1), GaussianMechanismSpec(plan.sigma, 100)])
        assert gdp_delta(mu, 1.0) <= 7.8e-7
        tighter = compose_gaussians([GaussianMechanismSpec(71.0, 1),
                                     GaussianMechanismSpec(round(plan.sigma - 0.1, 10), 100)])
        assert gdp_delta(tighter, 1.0) > 7.8e-7

    def test_without_mean_release(self):
        plan = pipeline.calibrate_linear_probe(1.0, 1e-5, 100)
        assert plan.sigma == pytest.approx(38.0, abs=0.1)
        assert gdp_epsilon(10 / plan.sigma, 1e-5) <= 1.0

    def test_mean_release_too_expensive(self):
        with pytest.raises(CalibrationError):
            pipeline.calibrate_linear_probe(1.0, 1e-5, 100, sigma1=0.5)

    def test_zero_steps(self):
        plan = pipeline.calibrate_linear_probe(1.0, 1e-5, 0, sigma1=10.0)
        assert plan.steps == 0
        assert plan.sigma == 0.0


class TestRunThreePhase:
    def test_report_and_ledger(self, plan, toy_encoder, encoder_params, toy_train, toy_test,
                               coarse_accounting, tmp_path):
        before = encoder_params.values.copy()
        report = pipeline.run_three_phase(plan, toy_encoder, encoder_params, toy_train, toy_test, seed=3,
                                          accounting=coarse_accounting, metrics_dir=tmp_path)
        np.testing.assert_array_equal(encoder_params.values, before)
        assert report.closed_epsilon <= plan.budget.epsilon + coarse_accounting.eps_error
        assert [e['purpose'] for e in report.ledger['entries']] == ['phase2', 'phase3']
        assert 0.0 <= report.accuracy <= 1.0
        assert 0.0 <= report.ema_accuracy <= 1.0
        assert (tmp_path / 'phase2_metrics.csv').exists()
        assert (tmp_path / 'phase3_metrics.csv').exists()
        assert 'phase2' in report.phase_accuracy

    def test_deterministic_per_seed(self, plan, toy_encoder, encoder_params, toy_train, toy_test,
                                    coarse_accounting):
        runs = [
            pipeline.run_three_phase(plan, toy_encoder, encoder_params, toy_train, toy_test, seed=3,
                                     accounting=coarse_accounting)
            for _ in range(2)
        ]
        assert runs[0].content() == runs[1].content()

    def test_ledger_matches_accountant(self, plan, toy_encoder, encoder_params, toy_train, toy_test,
                                       coarse_accounting):
        report = pipeline.run_three_phase(plan, toy_encoder, encoder_params, toy_train, toy_test, seed=0,
                                          accounting=coarse_accounting)
        # two phases at the same sigma and q compose like one schedule
        whole = accountant.epsilon_of(plan.phase2_config().mechanism().with_steps(plan.T_total), 1e-5,
                                      coarse_accounting)
        assert report.closed_epsilon == pytest.approx(whole, abs=0.05)

    def test_cold_baseline_equals_zero_probe_steps(self, plan, toy_encoder, toy_train, toy_test,
                                                   coarse_accounting):
        cold = pipeline.run_cold_baseline(plan, toy_encoder, toy_train, toy_test, seed=4,
                                          accounting=coarse_accounting)
        direct = pipeline.run_three_phase(dataclasses.replace(plan, N1=0), toy_encoder,
                                          pipeline.cold_encoder(toy_encoder, 4), toy_train, toy_test,
                                          seed=4, accounting=coarse_accounting)
        assert cold.method == pipeline.METHOD_COLD
        assert cold.accuracy == direct.accuracy
        assert cold.closed_epsilon == direct.closed_epsilon
        assert [e['purpose'] for e in cold.ledger['entries']] == ['phase3']

    def test_probe_only_schedule(self, plan, toy_encoder, encoder_params, toy_train, toy_test,
                                 coarse_accounting):
        report = pipeline.run_three_phase(dataclasses.replace(plan, N1=plan.T_total), toy_encoder,
                                          encoder_params, toy_train, toy_test, seed=1,
                                          accounting=coarse_accounting)
        assert [e['purpose'] for e in report.ledger['entries']] == ['phase2']

    def test_overspending_plan_aborts(self, plan, toy_encoder, encoder_params, toy_train, toy_test,
                                      coarse_accounting):
        tight = dataclasses.replace(plan, budget=PrivacyBudget(0.5, 1e-5))
        with pytest.raises(BudgetExceededError):
            pipeline.run_three_phase(tight, toy_encoder, encoder_params, toy_train, toy_test, seed=0,
                                     accounting=coarse_accounting)

    def test_two_stage_cold_tags_method(self, plan, toy_encoder, toy_train, toy_test, coarse_accounting):
        report = pipeline.run_two_stage_cold(plan, toy_encoder, toy_train, toy_test, seed=2,
                                             accounting=coarse_accounting)
        assert report.method == pipeline.METHOD_TWO_STAGE_COLD
        assert [e['purpose'] for e in report.ledger['entries']] == ['phase2', 'phase3']


class TestUnaccountedModes:
    @pytest.fixture
    def clip_only_plan(self):
        return pipeline.unaccounted_plan('clip_only', 1e-5, q=0.5, T_total=4, N1=2,
                                         lr_phase2=0.5, lr_phase3=0.2, ema_decay=0.9)

    def test_plan_carries_no_noise(self, clip_only_plan):
        assert clip_only_plan.budget.epsilon == math.inf
        assert clip_only_plan.phase2_config().mode == 'clip_only'
        assert clip_only_plan.phase3_config().noise_multiplier == 0.0
        assert clip_only_plan.phase3_config().mechanism() is None

    def test_private_mode_is_refused(self):
        with pytest.raises(ConfigError):
            pipeline.unaccounted_plan('private', 1e-5, q=0.5, T_total=4, N1=2)

    def test_three_phase_registers_nothing(self, clip_only_plan, toy_encoder, encoder_params,
                                           toy_train, toy_test, coarse_accounting):
        report = pipeline.run_three_phase(clip_only_plan, toy_encoder, encoder_params, toy_train,
                                          toy_test, seed=3, accounting=coarse_accounting)
        assert report.ledger['entries'] == []
        assert report.closed_epsilon == 0.0
        assert report.plan['mode'] == 'clip_only'

    def test_cold_baseline_runs_without_noise(self, clip_only_plan, toy_encoder, toy_train, toy_test,
                                              coarse_accounting):
        report = pipeline.run_cold_baseline(clip_only_plan, toy_encoder, toy_train, toy_test, seed=4,
                                            accounting=coarse_accounting)
        assert report.method == pipeline.METHOD_COLD
        assert report.ledger['entries'] == []

    def test_lp_only_at_infinite_epsilon(self, toy_encoder, encoder_params, toy_train, toy_test, tmp_path):
        plan = LinearProbePlan(budget=PrivacyBudget(math.inf, 1e-5), sigma=0.0, steps=3, mode='plain')
        report = pipeline.run_lp_only(plan, toy_encoder, encoder_params, toy_train, toy_test,
                                      PreprocConfig(norm_C=1.0), seed=0, features_dir=tmp_path)
        assert report.ledger['entries'] == []
        assert 0.0 <= report.accuracy <= 1.0
        stored = ArtifactStore(tmp_path).load_features(tmp_path / 'train_features.dprf')
        assert stored.rows.shape == (len(toy_train), toy_encoder.hidden_dims[-1])
        assert stored.provenance['norm_C'] == 1.0

    def test_private_linear_head_still_needs_noise(self):
        with pytest.raises(ConfigError):
            LinearProbePlan(budget=PrivacyBudget(1.0, 1e-5), sigma=0.0, steps=3)


class TestRunLpOnly:
    def test_ledger_closes_through_gdp(self, toy_encoder, encoder_params, toy_train, toy_test):
        plan = LinearProbePlan(budget=PrivacyBudget(50.0, 1e-5), sigma=5.0, steps=3, sigma1=5.0)
        report = pipeline.run_lp_only(plan, toy_encoder, encoder_params, toy_train, toy_test,
                                      PreprocConfig(norm_C=1.0), seed=0)
        assert [e['purpose'] for e in report.ledger['entries']] == ['mean_estimation', 'linear_probe']
        mu = compose_gaussians([GaussianMechanismSpec(5.0, 1), GaussianMechanismSpec(5.0, 3)])
        assert report.closed_epsilon == pytest.approx(gdp_epsilon(mu, 1e-5), abs=1e-9)
        assert report.plan['preproc']['sigma1'] == 5.0
        assert 0.0 <= report.accuracy <= 1.0

    def test_mean_step_only(self, toy_encoder, encoder_params, toy_train, toy_test):
        plan = LinearProbePlan(budget=PrivacyBudget(50.0, 1e-5), sigma=0.0, steps=0, sigma1=5.0)
        report = pipeline.run_lp_only(plan, toy_encoder, encoder_params, toy_train, toy_test,
                                      PreprocConfig(norm_C=1.0), seed=0)
        assert [e['purpose'] for e in report.ledger['entries']] == ['mean_estimation']

    def test_deterministic(self, toy_encoder, encoder_params, toy_train, toy_test):
        plan = LinearProbePlan(budget=PrivacyBudget(50.0, 1e-5), sigma=5.0, steps=3, sigma1=5.0)
        runs = [pipeline.run_lp_only(plan, toy_encoder, encoder_params, toy_train, toy_test,
                                     PreprocConfig(norm_C=1.0), seed=7).content() for _ in range(2)]
        assert runs[0] == runs[1]


def _fake_report(plan: PhasePlan) -> RunReport:
    if plan.N1 == 3:
        raise NumericalFailureError("diverged", step=2)
    return RunReport(method='fake', plan=plan.to_dict(), ledger={}, closed_epsilon=plan.epsilon1_report,
                     accuracy=plan.N1 / 10, ema_accuracy=plan.N1 / 10, seed=9)


class TestSweepAllocation:
    def test_rows_follow_input_order(self, coarse_accounting):
        base = PhasePlan(budget=PrivacyBudget(2.0, 1e-5), q=0.1, T_total=10, N1=0, sigma=2.0)
        rows = pipeline.sweep_allocation(base, [0, 5, 3, 10], _fake_report, coarse_accounting)
        assert [r.N1 for r in rows] == [0, 5, 3, 10]
        assert rows[0].epsilon1 == 0.0
        assert rows[1].accuracy == 0.5
        assert rows[1].epsilon1_fraction == pytest.approx(rows[1].epsilon1 / 2.0)
        assert rows[3].epsilon1 > rows[1].epsilon1

    def test_failed_point_is_recorded(self, coarse_accounting):
        base = PhasePlan(budget=PrivacyBudget(2.0, 1e-5), q=0.1, T_total=10, N1=0, sigma=2.0)
        rows = pipeline.sweep_allocation(base, [3, 4], _fake_report, coarse_accounting)
        assert rows[0].error.startswith('NumericalFailureError')
        assert np.isnan(rows[0].accuracy)
        assert rows[1].error == ''

    def test_sink_sees_each_successful_point(self, coarse_accounting):
        base = PhasePlan(budget=PrivacyBudget(2.0, 1e-5), q=0.1, T_total=10, N1=0, sigma=2.0)
        seen = []
        pipeline.sweep_allocation(base, [3, 4], _fake_report, coarse_accounting,
                                  report_sink=lambda row, report: seen.append((row.N1, report.plan['N1'])))
        assert seen == [(4, 4)]

    def test_rejects_out_of_range(self, coarse_accounting):
        base = PhasePlan(budget=PrivacyBudget(2.0, 1e-5), q=0.1, T_total=10, N1=0, sigma=2.0)
        with pytest.raises(ConfigError):
            pipeline.sweep_allocation(base, [11], _fake_report, coarse_accounting)
