"""
Three-phase private training with budget allocation between linear probing
and full fine-tuning, plus the linear-probe-only and cold-start baselines.
"""
import dataclasses
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from models.data import LabeledImages, PreprocConfig
from models.errors import CalibrationError, ConfigError, NoisePriorError
from models.network import KIND_LINEAR_HEAD, ModelSpec, ParameterVector
from models.privacy import AccountingConfig, PrivacyBudget, SubsampledGaussianSpec
from models.training import MODE_PRIVATE, LinearProbePlan, PhasePlan, RunReport, SweepRow, TrainResult
from utils import accountant, backprop, dp_optimizer, feature_preproc, helpers, reporting
from utils.ledger import PrivacyLedger
from utils.persistence import ArtifactStore
from utils.privacy_core import calibrate_gaussian_sigma
from utils.random_prior import Augmenter

logger = logging.getLogger(__name__)

METHOD_THREE_PHASE = 'three_phase'
METHOD_LP_ONLY = 'lp_only'
METHOD_COLD = 'cold'
METHOD_TWO_STAGE_COLD = 'two_stage_cold'
METHODS = (METHOD_THREE_PHASE, METHOD_LP_ONLY, METHOD_COLD, METHOD_TWO_STAGE_COLD)

DEFAULT_N1_FRACTION = 96 / 875


def recommend_n1(epsilon: float, T_total: int, small_epsilon: float = 0.5,
                 fraction: float = DEFAULT_N1_FRACTION) -> int:
    """Linear-probing steps: the whole schedule at small epsilon, else a fixed share of it."""
    if T_total < 1:
        raise ConfigError(f"T_total must be >= 1, got {T_total}")
    if epsilon < small_epsilon:
        return T_total
    return min(T_total, max(1, int(round(fraction * T_total))))


def epsilon1_for(sigma: float, q: float, N1: int, delta: float,
                 cfg: Optional[AccountingConfig] = None) -> float:
    """Accounted cost of the first N1 steps (zero when N1 = 0)."""
    if N1 == 0:
        return 0.0
    return accountant.epsilon_of(SubsampledGaussianSpec(sigma=sigma, q=q, steps=N1), delta, cfg)


def allocate_budget(epsilon: float, delta: float, q: float, T_total: int, N1: int,
                    cfg: Optional[AccountingConfig] = None, **plan_options) -> PhasePlan:
    """
    Calibrate one noise multiplier for the whole schedule and report what Phase II spends.

    Args:
        epsilon: Total epsilon
        delta: Target delta
        q: Poisson sampling rate of both private phases
        T_total: Phase II + Phase III steps
        N1: Phase II (linear probing) steps
        cfg: PLD accounting settings
        **plan_options: Learning rates, momenta and the other PhasePlan knobs

    Returns:
        PhasePlan with sigma and epsilon1_report filled in
    """
    if not 0 <= N1 <= T_total:
        raise ConfigError(f"N1 must lie in [0, T_total={T_total}], got {N1}")
    cfg = cfg or AccountingConfig.from_config()
    sigma = accountant.calibrate_sigma(epsilon, delta, q, T_total, cfg, sigma_max=Config.SIGMA_MAX)
    epsilon1 = epsilon1_for(sigma, q, N1, delta, cfg)
    plan = PhasePlan(
        budget=PrivacyBudget(epsilon=epsilon, delta=delta),
        q=q,
        T_total=T_total,
        N1=N1,
        sigma=sigma,
        epsilon1_report=epsilon1,
        **plan_options,
    )
    logger.info(
        f"Allocated: sigma={sigma}, N1={N1}/{T_total}, "
        f"epsilon1={epsilon1:.4f} ({plan.epsilon1_fraction:.3f} of {epsilon})"
    )
    return plan


def unaccounted_plan(mode: str, delta: float, q: float, T_total: int, N1: int,
                     **plan_options) -> PhasePlan:
    """Schedule for clip_only or plain training: no noise, nothing registered, epsilon = inf."""
    if mode == MODE_PRIVATE:
        raise ConfigError("private schedules are built by allocate_budget")
    return PhasePlan(
        budget=PrivacyBudget(epsilon=math.inf, delta=delta),
        q=q,
        T_total=T_total,
        N1=N1,
        sigma=0.0,
        mode=mode,
        **plan_options,
    )


def calibrate_linear_probe(epsilon: float, delta: float, steps: int, sigma1: float = 0.0,
                           **plan_options) -> LinearProbePlan:
    """
    Full-batch linear probing plan: the smallest sigma on the 0.1 grid such that
    the mean release (sigma1, once) composed with `steps` full-batch steps meets the budget.
    """
    sigma_eq = calibrate_gaussian_sigma(epsilon, delta, count=1)
    mu_sq = 1.0 / sigma_eq ** 2
    mean_share = 1.0 / sigma1 ** 2 if sigma1 > 0 else 0.0
    if steps == 0:
        if mean_share > mu_sq:
            raise CalibrationError(f"sigma1={sigma1} alone exceeds epsilon={epsilon}")
        return LinearProbePlan(budget=PrivacyBudget(epsilon=epsilon, delta=delta), sigma=0.0, steps=0,
                               sigma1=sigma1, **plan_options)
    if mean_share >= mu_sq:
        raise CalibrationError(f"sigma1={sigma1} leaves no budget for linear probing")
    grid = Config.SIGMA_GRID
    sigma = math.ceil(math.sqrt(steps / (mu_sq - mean_share)) / grid - 1e-9) * grid
    sigma = round(sigma, 10)
    logger.info(f"Linear probe: sigma={sigma} for {steps} full-batch steps, sigma1={sigma1}")
    return LinearProbePlan(budget=PrivacyBudget(epsilon=epsilon, delta=delta), sigma=sigma, steps=steps,
                           sigma1=sigma1, **plan_options)


def _num_classes(train: LabeledImages, test: Optional[LabeledImages]) -> int:
    count = train.num_classes
    if test is not None and len(test):
        count = max(count, test.num_classes)
    return count


def _inputs_hash(plan: dict, encoder_params: ParameterVector, train: LabeledImages, seed: int) -> str:
    return helpers.content_hash(
        helpers.canonical_json(plan),
        encoder_params.values,
        train.inputs,
        train.labels,
        str(seed),
    )


def _write_metrics(metrics_dir: Optional[Path], name: str, result: TrainResult) -> str:
    if metrics_dir is None:
        return ''
    return str(reporting.write_metrics_csv(Path(metrics_dir) / f'{name}_metrics.csv', result.metrics))


def _evaluate(spec: ModelSpec, params: ParameterVector, test: Optional[LabeledImages],
              inputs: Optional[np.ndarray] = None) -> float:
    if test is None or len(test) == 0:
        return float('nan')
    return backprop.accuracy(spec, params, test.inputs if inputs is None else inputs, test.labels)


def cold_encoder(encoder: ModelSpec, seed: int) -> ParameterVector:
    """Randomly initialized encoder parameters for the cold-start baselines."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    return backprop.init_params(encoder, rng)


def run_three_phase(plan: PhasePlan, encoder: ModelSpec, encoder_params: ParameterVector,
                    train: LabeledImages, test: Optional[LabeledImages], seed: int,
                    head_bias: bool = True, head_zero_init: bool = False,
                    method: str = METHOD_THREE_PHASE,
                    accounting: Optional[AccountingConfig] = None,
                    metrics_dir: Optional[Path] = None) -> RunReport:
    """
    Phase II trains a linear head on frozen encoder features for N1 steps;
    Phase III trains the whole classifier for T_total - N1 steps at the same sigma.

    Args:
        plan: Allocated schedule
        encoder: Encoder description (Phase I output, or a random one for cold baselines)
        encoder_params: Encoder parameters; never modified
        train: Private training set
        test: Held-out evaluation split
        seed: Seed for head initialization and both training phases
        head_bias: Give the head a bias
        head_zero_init: Start the head at zero
        method: Method tag written into the report
        accounting: PLD settings used by the ledger
        metrics_dir: Per-phase metric CSVs are written here when given

    Returns:
        RunReport with the closed ledger and final/EMA test accuracy
    """
    started = time.perf_counter()
    accounting = accounting or AccountingConfig.from_config()
    ledger = PrivacyLedger(plan.budget, accounting)
    num_classes = _num_classes(train, test)
    head_seq, phase2_seq, phase3_seq, reinit_seq = np.random.SeedSequence(seed).spawn(4)

    head = backprop.head_spec(encoder, num_classes, use_bias=head_bias, zero_init=head_zero_init)
    head_params = backprop.init_params(head, np.random.default_rng(head_seq))
    head_ema = head_params
    phase_metrics, phase_accuracy = {}, {}

    if plan.N1 > 0:
        train_feats = backprop.trunk_features(encoder, encoder_params, train.inputs)
        eval_set = None
        if test is not None and len(test):
            eval_set = (backprop.trunk_features(encoder, encoder_params, test.inputs), test.labels)
        cfg2 = plan.phase2_config()
        if cfg2.mechanism() is not None:
            ledger.register(cfg2.mechanism(), 'phase2')
        logger.info(f"Phase II: {plan.N1} steps on frozen features (dim {train_feats.shape[1]})")
        result2 = dp_optimizer.train(head, head_params, train_feats, train.labels, cfg2,
                                     seed=int(phase2_seq.generate_state(1)[0]), eval_set=eval_set)
        head_params = result2.params
        head_ema = result2.eval_params
        phase_metrics['phase2'] = _write_metrics(metrics_dir, 'phase2', result2)
        if eval_set is not None:
            phase_accuracy['phase2'] = backprop.accuracy(head, head_params, *eval_set)

    if plan.reinit_head_phase3 and plan.N2 > 0:
        head_params = backprop.init_params(head, np.random.default_rng(reinit_seq))
        head_ema = head_params

    clf_spec, clf_params = backprop.assemble_classifier(
        encoder, encoder_params, head, head_params, num_classes
    )
    _, ema_params = backprop.assemble_classifier(encoder, encoder_params, head, head_ema, num_classes)

    if plan.N2 > 0:
        cfg3 = plan.phase3_config()
        if cfg3.mechanism() is not None:
            ledger.register(cfg3.mechanism(), 'phase3')
        augmenter = Augmenter(train.image_size, train.channels) if cfg3.augmult > 0 else None
        eval_set = (test.inputs, test.labels) if test is not None and len(test) else None
        logger.info(f"Phase III: {plan.N2} steps on all {clf_params.size} parameters")
        result3 = dp_optimizer.train(clf_spec, clf_params, train.inputs, train.labels, cfg3,
                                     seed=int(phase3_seq.generate_state(1)[0]),
                                     augmenter=augmenter, eval_set=eval_set)
        clf_params = result3.params
        ema_params = result3.eval_params
        phase_metrics['phase3'] = _write_metrics(metrics_dir, 'phase3', result3)

    closed = ledger.close()
    report = RunReport(
        method=method,
        plan=plan.to_dict(),
        ledger=ledger.to_dict(),
        closed_epsilon=closed,
        accuracy=_evaluate(clf_spec, clf_params, test),
        ema_accuracy=_evaluate(clf_spec, ema_params, test),
        seed=seed,
        phase_metrics=phase_metrics,
        phase_accuracy=phase_accuracy,
        wall_time=time.perf_counter() - started,
        inputs_hash=_inputs_hash(plan.to_dict(), encoder_params, train, seed),
    )
    logger.info(f"{method}: accuracy={report.accuracy:.4f} ema={report.ema_accuracy:.4f} "
                f"epsilon={closed:.4f}")
    return report


def run_cold_baseline(plan: PhasePlan, encoder: ModelSpec, train: LabeledImages,
                      test: Optional[LabeledImages], seed: int, **options) -> RunReport:
    """Phase III only, from a random encoder."""
    plan = dataclasses.replace(plan, N1=0, epsilon1_report=0.0)
    return run_three_phase(plan, encoder, cold_encoder(encoder, seed), train, test, seed,
                           method=METHOD_COLD, **options)


def run_two_stage_cold(plan: PhasePlan, encoder: ModelSpec, train: LabeledImages,
                       test: Optional[LabeledImages], seed: int, **options) -> RunReport:
    """Linear probing then fine-tuning, both from a random encoder."""
    return run_three_phase(plan, encoder, cold_encoder(encoder, seed), train, test, seed,
                           method=METHOD_TWO_STAGE_COLD, **options)


def run_lp_only(plan: LinearProbePlan, encoder: ModelSpec, encoder_params: ParameterVector,
                train: LabeledImages, test: Optional[LabeledImages], preproc: PreprocConfig,
                seed: int, head_bias: bool = True, head_zero_init: bool = False,
                metrics_dir: Optional[Path] = None,
                features_dir: Optional[Path] = None) -> RunReport:
    """
    Extract -> normalize -> private mean -> center -> full-batch DP-SGD on a linear head.

    The ledger holds the mean release (sigma1, once) and the probe (sigma, steps);
    both are full-batch so the total closes through Gaussian-DP composition.
    A clip_only or plain plan registers the mean release only. When `features_dir`
    is given the preprocessed training features are written there as DPRF.
    """
    started = time.perf_counter()
    if preproc.sigma1 != plan.sigma1:
        preproc = dataclasses.replace(preproc, sigma1=plan.sigma1)
    ledger = PrivacyLedger(plan.budget, AccountingConfig.from_config())
    num_classes = _num_classes(train, test)
    mean_seq, head_seq, train_seq = np.random.SeedSequence(seed).spawn(3)

    features = feature_preproc.extract_features(encoder, encoder_params, train.inputs, preproc)
    processed, mean, mechanism = feature_preproc.preprocess(
        features, preproc, np.random.default_rng(mean_seq), accounting=True
    )
    if mechanism is not None:
        ledger.register(mechanism, 'mean_estimation')
    if features_dir is not None:
        ArtifactStore(features_dir).save_features('train_features.dprf', processed,
                                                  preproc=preproc.to_dict())

    head = ModelSpec(kind=KIND_LINEAR_HEAD, input_dim=processed.dim, output_dim=num_classes,
                     use_bias=head_bias, zero_init_head=head_zero_init)
    params = backprop.init_params(head, np.random.default_rng(head_seq))
    ema = params
    phase_metrics = {}

    if plan.steps > 0:
        if plan.mechanism() is not None:
            ledger.register(plan.mechanism(), 'linear_probe')
        result = dp_optimizer.train(head, params, processed.rows, train.labels, plan.train_config(),
                                    seed=int(train_seq.generate_state(1)[0]))
        params, ema = result.params, result.eval_params
        phase_metrics['linear_probe'] = _write_metrics(metrics_dir, 'linear_probe', result)

    test_rows = None
    if test is not None and len(test):
        test_feats = feature_preproc.extract_features(encoder, encoder_params, test.inputs, preproc)
        test_rows = feature_preproc.apply_preprocessing(test_feats, mean, preproc).rows

    closed = ledger.close()
    report = RunReport(
        method=METHOD_LP_ONLY,
        plan={**plan.to_dict(), 'preproc': preproc.to_dict()},
        ledger=ledger.to_dict(),
        closed_epsilon=closed,
        accuracy=_evaluate(head, params, test, test_rows),
        ema_accuracy=_evaluate(head, ema, test, test_rows),
        seed=seed,
        phase_metrics=phase_metrics,
        wall_time=time.perf_counter() - started,
        inputs_hash=_inputs_hash(plan.to_dict(), encoder_params, train, seed),
    )
    logger.info(f"lp_only: accuracy={report.accuracy:.4f} epsilon={closed:.4f}")
    return report


PlanRunner = Callable[[PhasePlan], RunReport]


def _sweep_point(runner: PlanRunner, plan: PhasePlan) -> Tuple[Optional[RunReport], str]:
    try:
        return runner(plan), ''
    except NoisePriorError as e:
        return None, f"{type(e).__name__}: {e}"


def sweep_allocation(base_plan: PhasePlan, N1_list: Sequence[int], runner: PlanRunner,
                     cfg: Optional[AccountingConfig] = None, jobs: int = 1,
                     report_sink: Optional[Callable[[SweepRow, RunReport], None]] = None) -> List[SweepRow]:
    """
    One run per N1 at the base plan's sigma.

    Args:
        base_plan: Plan whose sigma, q and T_total are shared by every point
        N1_list: Phase II step counts to try
        runner: Runs one plan (must be picklable when jobs > 1)
        cfg: PLD settings for the epsilon1 column
        jobs: Worker processes
        report_sink: Called with each successful row and its full report

    Returns:
        One row per N1 in input order; failed runs carry their error string
    """
    bad = [n1 for n1 in N1_list if not 0 <= n1 <= base_plan.T_total]
    if bad:
        raise ConfigError(f"N1 values {bad} lie outside [0, {base_plan.T_total}]")
    cfg = cfg or AccountingConfig.from_config()
    budget = base_plan.budget

    plans, rows = [], []
    for n1 in N1_list:
        try:
            epsilon1 = 0.0 if base_plan.mode != MODE_PRIVATE else epsilon1_for(
                base_plan.sigma, base_plan.q, n1, budget.delta, cfg)
        except NoisePriorError as e:
            logger.warning(f"Sweep N1={n1}: accounting failed: {e}")
            epsilon1 = float('nan')
        plans.append(dataclasses.replace(base_plan, N1=n1, epsilon1_report=epsilon1))
        fraction = epsilon1 / budget.epsilon if budget.epsilon > 0 else float('nan')
        rows.append(SweepRow(N1=n1, epsilon1=epsilon1, epsilon1_fraction=fraction))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_point, [runner] * len(plans), plans))
    else:
        outcomes = [_sweep_point(runner, plan) for plan in plans]

    for row, (report, error) in zip(rows, outcomes):
        if report is None:
            logger.warning(f"Sweep N1={row.N1} failed: {error}")
            row.error = error
            continue
        row.accuracy = report.accuracy
        row.ema_accuracy = report.ema_accuracy
        row.closed_epsilon = report.closed_epsilon
        row.seed = report.seed
        if report_sink is not None:
            report_sink(row, report)
    return rows


def epsilon1_fraction_table(rows: Sequence[Tuple[float, int, float, float]], n1: int, delta: float,
                            cfg: Optional[AccountingConfig] = None) -> List[dict]:
    """
    Share of the budget the first `n1` steps consume, for several (epsilon, T, sigma, q) plans.

    Returns:
        Dicts with epsilon, T_total, sigma, q, N1, epsilon1 and fraction
    """
    table = []
    for epsilon, T_total, sigma, q in rows:
        if n1 > T_total:
            raise ConfigError(f"N1={n1} exceeds T_total={T_total}")
        epsilon1 = epsilon1_for(sigma, q, n1, delta, cfg)
        table.append({
            'epsilon': epsilon,
            'T_total': T_total,
            'sigma': sigma,
            'q': q,
            'N1': n1,
            'epsilon1': epsilon1,
            'fraction': epsilon1 / epsilon,
        })
    return table


def fraction_curve(epsilons: Sequence[float], delta: float, q: float, T_total: int,
                   n1: Optional[int] = None,
                   cfg: Optional[AccountingConfig] = None) -> List[dict]:
    """epsilon1/epsilon across budgets at a fixed schedule, calibrating sigma per budget."""
    cfg = cfg or AccountingConfig.from_config()
    n1 = recommend_n1(max(epsilons), T_total) if n1 is None else n1
    plans = [(e, T_total, accountant.calibrate_sigma(e, delta, q, T_total, cfg,
                                                     sigma_max=Config.SIGMA_MAX), q)
             for e in epsilons]
    return epsilon1_fraction_table(plans, n1, delta, cfg)
