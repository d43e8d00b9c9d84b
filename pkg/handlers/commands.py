"""Command handlers for the noiseprior command line."""
import argparse
import dataclasses
import functools
import logging
import math
from pathlib import Path
from typing import List, Optional, Tuple

from config import Config, ExperimentConfig
from models.data import LabeledImages
from models.errors import (
    BudgetExceededError,
    CalibrationError,
    ConfigError,
    FormatError,
    NumericalFailureError,
    PldOverflowError,
    PrivacyDomainError,
    ShapeError,
)
from models.network import ModelSpec, ParameterVector
from models.privacy import AccountingConfig, GaussianMechanismSpec, PrivacyBudget, SubsampledGaussianSpec
from models.training import MODE_PRIVATE, LinearProbePlan, PhasePlan, RunReport, SweepRow
from utils import accountant, helpers, pipeline, random_prior, reporting
from utils.ledger import account_delta, account_entries
from utils.persistence import ArtifactStore

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_BUDGET = 3
EXIT_NUMERICAL = 4

ENCODER_FILE = 'encoder.dprp'
PRIVATE_TRAIN_FILE = 'data/private_train.dpri'
PRIVATE_TEST_FILE = 'data/private_test.dpri'
PUBLIC_FILE = 'data/public.dpri'

TRAIN_SPLIT_OFFSET = 10_000
TEST_SPLIT_OFFSET = 20_000


def exit_code_for(error: BaseException) -> int:
    """Map a library error onto the command-line exit code."""
    if isinstance(error, BudgetExceededError):
        return EXIT_BUDGET
    if isinstance(error, (NumericalFailureError, PldOverflowError)):
        return EXIT_NUMERICAL
    if isinstance(error, (ConfigError, PrivacyDomainError, CalibrationError, FormatError, ShapeError)):
        return EXIT_USAGE
    return EXIT_FAILURE


def _emit(record: dict):
    print(helpers.canonical_json(record))


class CommandHandlers:
    """Handlers for command-line subcommands; each returns an exit code."""

    def __init__(self, accounting: Optional[AccountingConfig] = None):
        """
        Initialize command handlers.

        Args:
            accounting: PLD settings shared by every command
        """
        self.accounting = accounting or AccountingConfig.from_config()

    # Accounting commands

    def cmd_calibrate(self, args: argparse.Namespace) -> int:
        """Smallest noise multiplier on the 0.1 grid for (eps, delta, q, steps)."""
        sigma = accountant.calibrate_sigma(args.eps, args.delta, args.q, args.steps,
                                           self.accounting, sigma_max=Config.SIGMA_MAX)
        spec = SubsampledGaussianSpec(sigma=sigma, q=args.q, steps=args.steps)
        verified = accountant.epsilon_of(spec, args.delta, self.accounting)
        _emit({
            'sigma': sigma,
            'epsilon': verified,
            'target_epsilon': args.eps,
            'delta': args.delta,
            'q': args.q,
            'steps': args.steps,
        })
        return EXIT_OK

    def cmd_account(self, args: argparse.Namespace) -> int:
        """Epsilon spent by a (possibly composed) set of Gaussian mechanisms."""
        mechanisms = []
        if args.mean_sigma is not None:
            mechanisms.append(GaussianMechanismSpec(noise_multiplier=args.mean_sigma, count=1))
        mechanisms.append(SubsampledGaussianSpec(sigma=args.sigma, q=args.q, steps=args.steps))
        record = {
            'sigma': args.sigma,
            'q': args.q,
            'steps': args.steps,
            'mean_sigma': args.mean_sigma,
            'delta': args.delta,
            'epsilon': account_entries(mechanisms, args.delta, self.accounting),
            'method': 'gdp' if args.q == 1.0 else 'pld',
        }
        if args.eps is not None:
            record['delta_at_eps'] = {'epsilon': args.eps,
                                      'delta': account_delta(mechanisms, args.eps, self.accounting)}
        if args.q < 1.0 and args.mean_sigma is None:
            record['rdp_epsilon'] = accountant.rdp_epsilon(mechanisms[-1], args.delta)
        _emit(record)
        return EXIT_OK

    # Experiment commands

    def cmd_gen_data(self, args: argparse.Namespace) -> int:
        """Write the public pretraining pool and the private train/test splits."""
        config = ExperimentConfig.load(args.config)
        store = ArtifactStore(config.output_dir)
        public = config.generator_spec()
        n_public = args.public_n or config.pretrain.pool_size
        pool = random_prior.generate_array(public, n_public)
        store.save_dataset(
            PUBLIC_FILE,
            LabeledImages(inputs=pool, labels=[0] * n_public, image_size=public.image_size),
            generator=public,
            seed=public.seed,
        )
        train, test = self._private_splits(config, store, write=True)
        _emit({'public': n_public, 'private_train': len(train), 'private_test': len(test),
               'output_dir': str(store.root)})
        return EXIT_OK

    def cmd_pretrain(self, args: argparse.Namespace) -> int:
        """Phase I: contrastive pretraining on synthetic images (no privacy cost)."""
        config = ExperimentConfig.load(args.config)
        store = ArtifactStore(config.output_dir)
        encoder = config.encoder_spec()
        seed = config.seeds.base
        records: List[dict] = []
        params = random_prior.pretrain_encoder(
            config.generator_spec(), encoder, config.contrastive_config(), seed,
            augment_cfg=config.augment_config(), pool_size=config.pretrain.pool_size,
            metrics_sink=records.append,
        )
        path = store.save_checkpoint(args.out or ENCODER_FILE, encoder, params, seed,
                                     provenance={'phase': 'pretrain', 'config': config.to_dict()})
        reporting.write_csv(store.path('pretrain_metrics.csv'), records,
                            ['step', 'align', 'uniform', 'loss'])
        _emit({'checkpoint': str(path), 'parameters': params.size,
               'final_loss': records[-1]['loss'] if records else None})
        return EXIT_OK

    def cmd_train(self, args: argparse.Namespace) -> int:
        """Run one method for every configured budget and seed."""
        config = ExperimentConfig.load(args.config)
        store = ArtifactStore(config.output_dir)
        train, test = self._private_splits(config, store)
        encoder, encoder_params = self._encoder(config, store, args.encoder, args.method)
        mode = args.mode or config.plan.mode
        budgets = config.plan.epsilons or [config.plan.epsilon]
        if mode != MODE_PRIVATE:
            budgets = [math.inf]

        summaries = []
        for epsilon in budgets:
            plan = self._plan(config, epsilon, args.method, mode)
            label = f'eps{epsilon:g}' if mode == MODE_PRIVATE else mode
            for seed in config.seeds.values():
                run_dir = Path(args.method) / label / f'seed{seed}'
                report = self._run(args.method, plan, config, encoder, encoder_params,
                                   train, test, seed, store.path(run_dir))
                self._write_run(store, run_dir, config, report)
                summaries.append({'epsilon': epsilon, 'seed': seed, 'accuracy': report.accuracy,
                                  'closed_epsilon': report.closed_epsilon})
        _emit({'method': args.method, 'mode': mode, 'runs': summaries})
        return EXIT_OK

    def cmd_sweep(self, args: argparse.Namespace) -> int:
        """Allocation sweep over N1 at a fixed sigma, one table per seed set."""
        config = ExperimentConfig.load(args.config)
        store = ArtifactStore(config.output_dir)
        train, test = self._private_splits(config, store)
        encoder, encoder_params = self._encoder(config, store, args.encoder, pipeline.METHOD_THREE_PHASE)
        p = config.plan
        base = self._three_phase_plan(config, p.epsilon, N1=0, mode=p.mode)
        N1_list = p.N1_list or sorted({0, pipeline.recommend_n1(p.epsilon, p.T_total), p.T_total})

        rows = []
        for seed in config.seeds.values():
            runner = functools.partial(
                pipeline.run_three_phase,
                encoder=encoder,
                encoder_params=encoder_params,
                train=train,
                test=test,
                seed=seed,
                head_bias=config.optimizer.head_bias,
                head_zero_init=config.optimizer.head_zero_init,
                accounting=self.accounting,
            )
            sink = functools.partial(self._write_sweep_point, store, config)
            rows.extend(r.to_dict() for r in
                        pipeline.sweep_allocation(base, N1_list, runner, self.accounting, jobs=args.jobs,
                                                  report_sink=sink))
        sweep_csv = reporting.write_csv(store.path('sweep/sweep.csv'), rows,
                                        ['N1', 'epsilon1', 'epsilon1_fraction', 'accuracy',
                                         'ema_accuracy', 'closed_epsilon', 'seed', 'error'])
        outputs = {'sweep': str(sweep_csv), 'sigma': base.sigma}

        if len(p.epsilons) > 1:
            curve = pipeline.fraction_curve(p.epsilons, p.delta, p.q, p.T_total, p.N1, self.accounting)
            outputs['fractions'] = str(reporting.write_csv(
                store.path('sweep/fractions.csv'), curve,
                ['epsilon', 'T_total', 'sigma', 'q', 'N1', 'epsilon1', 'fraction']))
        failures = sum(1 for r in rows if r['error'])
        outputs['failed_rows'] = failures
        _emit(outputs)
        return EXIT_OK

    def cmd_report(self, args: argparse.Namespace) -> int:
        """Summary table and plots for a directory of runs."""
        runs_dir = Path(args.runs)
        if not runs_dir.is_dir():
            raise ConfigError(f"runs directory not found: {runs_dir}")
        out_dir = Path(args.out) if args.out else runs_dir / 'report'
        written = reporting.render_report(runs_dir, out_dir)
        _emit({'written': [str(p) for p in written]})
        return EXIT_OK

    # Shared plumbing

    def _private_splits(self, config: ExperimentConfig, store: ArtifactStore,
                        write: bool = False) -> Tuple[LabeledImages, LabeledImages]:
        """Private splits from disk when gen-data wrote them, else regenerated deterministically."""
        train_path, test_path = store.path(PRIVATE_TRAIN_FILE), store.path(PRIVATE_TEST_FILE)
        if not write and train_path.exists() and test_path.exists():
            return store.load_dataset(train_path), store.load_dataset(test_path)

        d = config.private_dataset
        spec = config.private_generator_spec()
        base = config.generator.seed
        train = random_prior.make_private_dataset(spec, d.n, TRAIN_SPLIT_OFFSET + base,
                                                  d.num_classes, d.band_gap)
        test = random_prior.make_private_dataset(spec, d.n_test, TEST_SPLIT_OFFSET + base,
                                                 d.num_classes, d.band_gap)
        if write:
            store.save_dataset(PRIVATE_TRAIN_FILE, train, spec, TRAIN_SPLIT_OFFSET + base)
            store.save_dataset(PRIVATE_TEST_FILE, test, spec, TEST_SPLIT_OFFSET + base)
        return train, test

    def _encoder(self, config: ExperimentConfig, store: ArtifactStore, path: Optional[str],
                 method: str) -> Tuple[ModelSpec, Optional[ParameterVector]]:
        encoder = config.encoder_spec()
        if method in (pipeline.METHOD_COLD, pipeline.METHOD_TWO_STAGE_COLD):
            return encoder, None
        checkpoint = Path(path) if path else store.path(ENCODER_FILE)
        if not checkpoint.exists():
            raise ConfigError(f"encoder checkpoint {checkpoint} not found; run pretrain first")
        stored, params, _ = store.load_checkpoint(checkpoint)
        if stored != encoder:
            logger.warning("Checkpoint model differs from the configured encoder; using the checkpoint")
        return stored, params

    def _three_phase_plan(self, config: ExperimentConfig, epsilon: float,
                          N1: Optional[int] = None, mode: str = MODE_PRIVATE) -> PhasePlan:
        p, o = config.plan, config.optimizer
        if N1 is None:
            N1 = p.N1 if p.N1 is not None else pipeline.recommend_n1(epsilon, p.T_total)
        options = dict(
            lr_phase2=o.lr_phase2,
            lr_phase3=o.lr_phase3,
            momentum_phase2=o.momentum_phase2,
            momentum_phase3=o.momentum_phase3,
            augmult_phase3=o.augmult,
            clip_norm=o.clip_norm,
            ema_decay=o.ema_decay,
            reinit_head_phase3=o.reinit_head_phase3,
        )
        if mode != MODE_PRIVATE:
            return pipeline.unaccounted_plan(mode, p.delta, p.q, p.T_total, N1, **options)
        return pipeline.allocate_budget(epsilon, p.delta, p.q, p.T_total, N1, self.accounting, **options)

    def _plan(self, config: ExperimentConfig, epsilon: float, method: str, mode: str = MODE_PRIVATE):
        if method == pipeline.METHOD_LP_ONLY:
            pp = config.preproc
            options = dict(learning_rate=pp.lp_learning_rate, momentum=pp.lp_momentum,
                           clip_norm=config.optimizer.clip_norm)
            if mode != MODE_PRIVATE:
                return LinearProbePlan(budget=PrivacyBudget(epsilon=math.inf, delta=config.plan.delta),
                                       sigma=0.0, steps=pp.lp_steps, sigma1=pp.sigma1, mode=mode,
                                       **options)
            if pp.lp_sigma is not None:
                return LinearProbePlan(budget=PrivacyBudget(epsilon=epsilon, delta=config.plan.delta),
                                       sigma=pp.lp_sigma, steps=pp.lp_steps, sigma1=pp.sigma1,
                                       **options)
            return pipeline.calibrate_linear_probe(epsilon, config.plan.delta, pp.lp_steps,
                                                   pp.sigma1, **options)
        if method == pipeline.METHOD_COLD:
            return self._three_phase_plan(config, epsilon, N1=0, mode=mode)
        return self._three_phase_plan(config, epsilon, mode=mode)

    def _run(self, method: str, plan, config: ExperimentConfig, encoder: ModelSpec,
             encoder_params: Optional[ParameterVector], train: LabeledImages, test: LabeledImages,
             seed: int, metrics_dir: Path) -> RunReport:
        options = dict(head_bias=config.optimizer.head_bias,
                       head_zero_init=config.optimizer.head_zero_init,
                       metrics_dir=metrics_dir)
        if method == pipeline.METHOD_LP_ONLY:
            return pipeline.run_lp_only(plan, encoder, encoder_params, train, test,
                                        config.preproc_config(), seed, features_dir=metrics_dir, **options)
        if method == pipeline.METHOD_COLD:
            return pipeline.run_cold_baseline(plan, encoder, train, test, seed,
                                              accounting=self.accounting, **options)
        if method == pipeline.METHOD_TWO_STAGE_COLD:
            return pipeline.run_two_stage_cold(plan, encoder, train, test, seed,
                                               accounting=self.accounting, **options)
        return pipeline.run_three_phase(plan, encoder, encoder_params, train, test, seed,
                                        accounting=self.accounting, **options)

    def _write_sweep_point(self, store: ArtifactStore, config: ExperimentConfig, row: SweepRow,
                           report: RunReport):
        # per-N1 method tag keeps sweep points out of the plain three_phase summary rows
        tagged = dataclasses.replace(report, method=f'{report.method}_N1_{row.N1}')
        self._write_run(store, Path('sweep') / f'N1_{row.N1}' / f'seed{report.seed}', config, tagged)

    def _write_run(self, store: ArtifactStore, run_dir: Path, config: ExperimentConfig,
                   report: RunReport):
        limit = report.ledger['budget']['epsilon'] + self.accounting.eps_error
        if not report.closed_epsilon <= limit or math.isnan(report.closed_epsilon):
            raise BudgetExceededError(f"run closed at {report.closed_epsilon} above {limit}")
        store.save_json(run_dir / 'config.json', config.to_dict())
        store.save_json(run_dir / 'report.json', report.to_dict())
        store.save_json(run_dir / 'report_hash.json', {
            'content_hash': helpers.content_hash(helpers.canonical_json(report.content()))})
