"""CSV tables and SVG plots summarizing runs and allocation sweeps."""
import csv
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Union

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from models.training import MetricRow  # noqa: E402
from utils import helpers  # noqa: E402

logger = logging.getLogger(__name__)

METRIC_FIELDS = ['step', 'train_loss', 'eval_acc', 'grad_norm_median', 'clipped_fraction', 'batch_size']
SUMMARY_FIELDS = ['method', 'epsilon', 'accuracy_mean', 'accuracy_std', 'ema_accuracy_mean',
                  'ema_accuracy_std', 'runs']


def write_csv(path: Union[str, Path], rows: Iterable[dict], fieldnames: Sequence[str]) -> Path:
    """Write dict rows; keys outside `fieldnames` are dropped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction='ignore')
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    logger.info(f"Wrote {path}")
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def write_metrics_csv(path: Union[str, Path], rows: Sequence[MetricRow]) -> Path:
    return write_csv(path, (r.to_dict() for r in rows), METRIC_FIELDS)


def collect_reports(runs_dir: Union[str, Path]) -> List[dict]:
    """Every report.json below `runs_dir`, in path order."""
    paths = sorted(Path(runs_dir).rglob('report.json'))
    reports = []
    for path in paths:
        try:
            reports.append(helpers.read_json(path))
        except ValueError as e:
            logger.warning(f"Skipping unreadable report {path}: {e}")
    logger.info(f"Collected {len(reports)} reports from {runs_dir}")
    return reports


def _report_epsilon(report: dict) -> float:
    return float(report['plan']['budget']['epsilon'])


def _mean_std(values: List[float]):
    arr = np.asarray([v for v in values if v is not None and not math.isnan(v)], dtype=float)
    if arr.size == 0:
        return float('nan'), float('nan')
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize_reports(reports: Sequence[dict]) -> List[dict]:
    """
    Aggregate runs by (method, epsilon).

    Returns:
        Rows with accuracy mean and sample std over seeds, sorted by method then epsilon
    """
    groups = defaultdict(list)
    for report in reports:
        groups[(report['method'], _report_epsilon(report))].append(report)
    rows = []
    for (method, epsilon), group in sorted(groups.items()):
        acc_mean, acc_std = _mean_std([r['accuracy'] for r in group])
        ema_mean, ema_std = _mean_std([r['ema_accuracy'] for r in group])
        rows.append({
            'method': method,
            'epsilon': epsilon,
            'accuracy_mean': acc_mean,
            'accuracy_std': acc_std,
            'ema_accuracy_mean': ema_mean,
            'ema_accuracy_std': ema_std,
            'runs': len(group),
        })
    return rows


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format='svg', bbox_inches='tight')
    plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def plot_accuracy_vs_epsilon(summary: Sequence[dict], path: Union[str, Path]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    by_method = defaultdict(list)
    for row in summary:
        by_method[row['method']].append(row)
    for method, rows in sorted(by_method.items()):
        # non-private runs have no epsilon to place them at
        for row in rows:
            if math.isinf(row['epsilon']):
                ax.axhline(row['accuracy_mean'], linestyle='--', linewidth=1, label=f'{method} (no noise)')
        rows = sorted((r for r in rows if math.isfinite(r['epsilon'])), key=lambda r: r['epsilon'])
        if not rows:
            continue
        ax.errorbar([r['epsilon'] for r in rows], [r['accuracy_mean'] for r in rows],
                    yerr=[r['accuracy_std'] for r in rows], marker='o', capsize=3, label=method)
    ax.set_xlabel('epsilon')
    ax.set_ylabel('test accuracy')
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], path: Union[str, Path]) -> Path:
    """Accuracy against the fraction of the budget spent on linear probing."""
    grouped = defaultdict(list)
    for row in rows:
        if not row.get('error'):
            grouped[float(row['epsilon1_fraction'])].append(float(row['accuracy']))
    xs = sorted(grouped)
    means = [float(np.mean(grouped[x])) for x in xs]
    stds = [float(np.std(grouped[x])) for x in xs]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, means, yerr=stds, marker='o', capsize=3)
    ax.set_xlabel('epsilon1 / epsilon')
    ax.set_ylabel('test accuracy')
    return _save(fig, path)


def plot_fraction_curve(rows: Sequence[dict], path: Union[str, Path]) -> Path:
    rows = sorted(rows, key=lambda r: float(r['epsilon']))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([float(r['epsilon']) for r in rows], [float(r['fraction']) for r in rows], marker='o')
    ax.set_xlabel('epsilon')
    ax.set_ylabel('epsilon1 / epsilon')
    return _save(fig, path)


def render_report(runs_dir: Union[str, Path], out_dir: Union[str, Path]) -> List[Path]:
    """
    Summary table and plots for everything found under `runs_dir`.

    Sweep CSVs (sweep.csv) and fraction curves (fractions.csv) found there
    are plotted next to the summary.
    """
    runs_dir, out_dir = Path(runs_dir), Path(out_dir)
    written = []
    summary = summarize_reports(collect_reports(runs_dir))
    written.append(write_csv(out_dir / 'summary.csv', summary, SUMMARY_FIELDS))
    if summary:
        written.append(plot_accuracy_vs_epsilon(summary, out_dir / 'accuracy_vs_epsilon.svg'))
    for sweep_csv in sorted(runs_dir.rglob('sweep.csv')):
        name = sweep_csv.parent.name or 'sweep'
        written.append(plot_sweep(read_csv(sweep_csv), out_dir / f'{name}_sweep.svg'))
    for fraction_csv in sorted(runs_dir.rglob('fractions.csv')):
        name = fraction_csv.parent.name or 'fractions'
        written.append(plot_fraction_curve(read_csv(fraction_csv), out_dir / f'{name}_fractions.svg'))
    return written
