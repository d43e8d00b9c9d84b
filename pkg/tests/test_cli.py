import json

import pytest

from handlers import exit_code_for
from handlers.commands import EXIT_BUDGET, EXIT_FAILURE, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE
from main import main
from models.errors import (
    BudgetExceededError,
    CalibrationError,
    ConfigError,
    FormatError,
    NoisePriorError,
    NumericalFailureError,
    PldOverflowError,
    PrivacyDomainError,
    ShapeError,
)
from utils import helpers


def _run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if code == EXIT_OK else out)


@pytest.mark.parametrize('error, code', [
    (BudgetExceededError('x'), EXIT_BUDGET),
    (NumericalFailureError('x', step=3), EXIT_NUMERICAL),
    (PldOverflowError('x'), EXIT_NUMERICAL),
    (ConfigError('x'), EXIT_USAGE),
    (PrivacyDomainError('x'), EXIT_USAGE),
    (CalibrationError('x'), EXIT_USAGE),
    (FormatError('x'), EXIT_USAGE),
    (ShapeError('x'), EXIT_USAGE),
    (NoisePriorError('x'), EXIT_FAILURE),
])
def test_exit_codes(error, code):
    assert exit_code_for(error) == code


def test_missing_flag_is_a_usage_error(capsys):
    assert main(['calibrate', '--eps', '1', '--delta', '1e-5', '--q', '0.1']) == EXIT_USAGE


def test_negative_sigma_is_a_domain_error(capsys):
    code, _ = _run(capsys, 'account', '--sigma', '-1', '--q', '1', '--steps', '10', '--delta', '1e-5')
    assert code == EXIT_USAGE


def test_account_mean_release_and_probe(capsys):
    code, record = _run(capsys, 'account', '--sigma', '43', '--q', '1', '--steps', '100',
                        '--mean-sigma', '71', '--delta', '7.8e-7', '--eps', '1')
    assert code == EXIT_OK
    assert record['method'] == 'gdp'
    assert record['epsilon'] <= 1.0
    assert record['delta_at_eps']['delta'] <= 7.8e-7
    assert 'rdp_epsilon' not in record


def test_account_subsampled_reports_rdp(capsys):
    code, record = _run(capsys, 'account', '--sigma', '2', '--q', '0.1', '--steps', '20', '--delta', '1e-5')
    assert code == EXIT_OK
    assert record['method'] == 'pld'
    assert record['rdp_epsilon'] >= record['epsilon'] - 0.01


def test_report_requires_existing_directory(capsys, tmp_path):
    code, _ = _run(capsys, 'report', '--runs', str(tmp_path / 'missing'))
    assert code == EXIT_USAGE


def test_report_over_runs(capsys, tmp_path):
    for seed, acc in enumerate([0.5, 0.7]):
        helpers.write_json(tmp_path / 'runs' / f'seed{seed}' / 'report.json', {
            'method': 'three_phase',
            'plan': {'budget': {'epsilon': 1.0, 'delta': 1e-5}},
            'accuracy': acc,
            'ema_accuracy': acc,
            'seed': seed,
        })
    code, record = _run(capsys, 'report', '--runs', str(tmp_path / 'runs'), '--out', str(tmp_path / 'out'))
    assert code == EXIT_OK
    assert str(tmp_path / 'out' / 'summary.csv') in record['written']


def test_train_without_config_file(capsys, tmp_path):
    code, _ = _run(capsys, 'train', '--config', str(tmp_path / 'nope.json'))
    assert code == EXIT_USAGE


@pytest.mark.slow
@pytest.mark.parametrize('epsilon, steps, sigma', [(1, 875, 9.3), (8, 2468, 2.6)])
def test_calibrate_large_batch_rows(capsys, epsilon, steps, sigma):
    code, record = _run(capsys, 'calibrate', '--eps', str(epsilon), '--delta', '1e-5',
                        '--q', str(4096 / 50000), '--steps', str(steps))
    assert code == EXIT_OK
    assert record['sigma'] == sigma
    assert record['epsilon'] <= epsilon + 0.01


@pytest.fixture
def tiny_config(tmp_path):
    config = {
        'generator': {'kind': 'dead_leaves', 'image_size': 8, 'params': {}, 'seed': 0},
        'encoder': {'hidden_dims': [8], 'output_dim': 4, 'activation': 'tanh',
                    'frontend': True, 'patch_size': 4, 'num_filters': 2, 'stride': 2},
        'pretrain': {'batch_size': 8, 'steps': 2, 'pool_size': 32},
        'private_dataset': {'n': 40, 'n_test': 20, 'num_classes': 3, 'image_size': 8},
        'plan': {'epsilon': 8.0, 'delta': 1e-5, 'q': 0.5, 'T_total': 4, 'N1': 2},
        'optimizer': {'ema_decay': 0.9},
        'seeds': {'base': 0, 'count': 1},
        'output_dir': str(tmp_path / 'run'),
    }
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(config))
    return path


@pytest.mark.slow
def test_end_to_end_is_reproducible(capsys, tiny_config, tmp_path):
    assert _run(capsys, 'gen-data', '--config', str(tiny_config))[0] == EXIT_OK
    code, record = _run(capsys, 'pretrain', '--config', str(tiny_config))
    assert code == EXIT_OK
    assert record['checkpoint'].endswith('encoder.dprp')

    hash_path = tmp_path / 'run' / 'three_phase' / 'eps8' / 'seed0' / 'report_hash.json'
    hashes = []
    for _ in range(2):
        code, record = _run(capsys, 'train', '--config', str(tiny_config))
        assert code == EXIT_OK
        assert record['runs'][0]['closed_epsilon'] <= 8.0 + 0.01
        hashes.append(helpers.read_json(hash_path)['content_hash'])
    assert hashes[0] == hashes[1]


def test_clip_only_cold_run_spends_nothing(capsys, tiny_config, tmp_path):
    code, record = _run(capsys, 'train', '--config', str(tiny_config), '--method', 'cold',
                        '--mode', 'clip_only')
    assert code == EXIT_OK
    assert record['mode'] == 'clip_only'
    assert record['runs'][0]['closed_epsilon'] == 0.0
    report = helpers.read_json(tmp_path / 'run' / 'cold' / 'clip_only' / 'seed0' / 'report.json')
    assert report['ledger']['entries'] == []


@pytest.mark.slow
def test_sweep_writes_every_point(capsys, tiny_config, tmp_path):
    assert _run(capsys, 'pretrain', '--config', str(tiny_config))[0] == EXIT_OK
    code, record = _run(capsys, 'sweep', '--config', str(tiny_config))
    assert code == EXIT_OK
    assert record['failed_rows'] == 0
    for n1 in (0, 4):
        run_dir = tmp_path / 'run' / 'sweep' / f'N1_{n1}' / 'seed0'
        report = helpers.read_json(run_dir / 'report.json')
        assert report['method'] == f'three_phase_N1_{n1}'
        assert report['plan']['N1'] == n1
        assert (run_dir / 'config.json').exists()
        assert 'content_hash' in helpers.read_json(run_dir / 'report_hash.json')
