"""DP-SGD: per-sample clipping, Gaussian noise, Poisson sampling, augmult, momentum and EMA."""
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from models.errors import ConfigError, NumericalFailureError
from models.network import Example, ModelSpec, ParameterVector, stack_examples
from models.training import DpSgdConfig, MetricRow, TrainResult, TrainState
from utils import backprop

logger = logging.getLogger(__name__)

Augmenter = Callable[[np.ndarray, np.random.Generator], np.ndarray]
MetricsSink = Callable[[MetricRow], None]

# examples (times augmult views) per gradient chunk
_CHUNK_ROWS = 512


@dataclass
class StepStats:
    loss: float
    batch_size: int
    grad_norm_median: float
    clipped_fraction: float


def clip(g: Union[ParameterVector, np.ndarray], c: float):
    """c * g / max(c, ||g||); an infinite c leaves g untouched."""
    values = g.values if isinstance(g, ParameterVector) else np.asarray(g, dtype=np.float64)
    if math.isinf(c):
        clipped = values.copy()
    else:
        norm = np.linalg.norm(values)
        clipped = values * (c / max(c, norm)) if norm > c else values.copy()
    return g.with_values(clipped) if isinstance(g, ParameterVector) else clipped


def clip_rows(grads: np.ndarray, c: float) -> Tuple[np.ndarray, np.ndarray]:
    """Clip every row to norm c; returns (clipped rows, original norms)."""
    norms = np.linalg.norm(grads, axis=1)
    if math.isinf(c):
        return grads, norms
    factors = np.where(norms > c, c / np.maximum(norms, c), 1.0)
    return grads * factors[:, None], norms


def clipped_sum(grads: np.ndarray, c: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sum of clipped per-sample gradients divided by c (raw sum when c is infinite).

    Each row then contributes at most norm 1, so the sum has L2 sensitivity 1.
    """
    clipped, norms = clip_rows(grads, c)
    total = clipped.sum(axis=0)
    if not math.isinf(c):
        total = total / c
    return total, norms


def noisy_aggregate(per_sample_grads: Union[Sequence[ParameterVector], np.ndarray], c: float,
                    sigma: float, noise_rng: np.random.Generator,
                    like: Optional[ParameterVector] = None) -> ParameterVector:
    """
    Sum of c-normalized clipped gradients plus sigma times standard normal noise.

    Args:
        per_sample_grads: Gradients (possibly empty)
        c: Clip norm
        sigma: Noise multiplier
        noise_rng: Noise stream
        like: Template for the result layout (required when the list is empty)

    Returns:
        The noisy statistic
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    if isinstance(per_sample_grads, np.ndarray):
        rows = per_sample_grads
        template = like
    else:
        grads = list(per_sample_grads)
        template = like or (grads[0] if grads else None)
        if template is None:
            raise ConfigError("empty gradient list needs a layout template")
        rows = np.stack([g.values for g in grads]) if grads else np.zeros((0, template.size))
    dim = template.size if template is not None else rows.shape[1]
    total = clipped_sum(rows, c)[0] if rows.shape[0] else np.zeros(dim)
    if sigma > 0:
        total = total + sigma * noise_rng.standard_normal(dim)
    if template is None:
        return ParameterVector(values=total)
    return template.with_values(total)


def poisson_sample(dataset_size: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices included independently with probability q."""
    if not 0 < q <= 1:
        raise ConfigError(f"sampling rate must be in (0, 1], got {q}")
    if q == 1.0:
        return np.arange(dataset_size)
    return np.nonzero(rng.random(dataset_size) < q)[0]


def _view_grads(model: ModelSpec, params: ParameterVector, inputs: np.ndarray,
                labels: np.ndarray, views: int, augmenter: Optional[Augmenter],
                aug_rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample gradients averaged over `views` augmented copies of each input."""
    if views <= 1 and augmenter is None:
        return backprop.per_sample_grads(model, params, inputs, labels)
    if augmenter is None:
        raise ConfigError("augmentation multiplicity needs an augmenter")
    k = max(views, 1)
    n = inputs.shape[0]
    expanded = np.stack([augmenter(x, aug_rng) for x in inputs for _ in range(k)])
    losses, grads = backprop.per_sample_grads(model, params, expanded, np.repeat(labels, k))
    return losses.reshape(n, k).mean(axis=1), grads.reshape(n, k, -1).mean(axis=1)


def augmult_grad(model: ModelSpec, params: ParameterVector, example: Example, K: int,
                 aug_rng: np.random.Generator, augmenter: Optional[Augmenter] = None) -> ParameterVector:
    """Gradient of one example averaged over K augmented views, before clipping."""
    if K < 1:
        raise ConfigError(f"augmult K must be >= 1, got {K}")
    inputs, labels = stack_examples([example])
    _, grads = _view_grads(model, params, inputs, labels, K, augmenter, aug_rng)
    return params.with_values(grads[0])


def _private_sum(model: ModelSpec, params: ParameterVector, inputs: np.ndarray,
                 labels: np.ndarray, cfg: DpSgdConfig, augmenter: Optional[Augmenter],
                 aug_rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chunked clipped sum; returns (sum, per-sample norms, per-sample losses)."""
    views = max(cfg.augmult, 1)
    chunk = max(1, _CHUNK_ROWS // views)
    total = np.zeros(params.size)
    norms, losses = [], []
    for start in range(0, inputs.shape[0], chunk):
        stop = start + chunk
        chunk_losses, grads = _view_grads(
            model, params, inputs[start:stop], labels[start:stop],
            cfg.augmult, augmenter if cfg.augmult else None, aug_rng,
        )
        part, part_norms = clipped_sum(grads, cfg.clip_norm)
        total = total + part
        norms.append(part_norms)
        losses.append(chunk_losses)
    if not norms:
        return total, np.zeros(0), np.zeros(0)
    return total, np.concatenate(norms), np.concatenate(losses)


def step_on_arrays(state: TrainState, inputs: np.ndarray, labels: np.ndarray, model: ModelSpec,
                   cfg: DpSgdConfig, dataset_size: int,
                   augmenter: Optional[Augmenter] = None) -> Tuple[TrainState, StepStats]:
    """One DP-SGD transition on a batch given as arrays."""
    if state.step_index >= cfg.steps:
        raise ConfigError(f"step {state.step_index} is past the configured {cfg.steps} steps")
    expected_batch = cfg.sampling_rate * dataset_size
    if expected_batch <= 0:
        raise ConfigError("expected batch size must be positive")

    streams = state.rng_streams
    total, norms, losses = _private_sum(
        model, state.params, inputs, labels, cfg, augmenter, streams.augmentation
    )
    if cfg.noise_multiplier > 0:
        total = total + cfg.noise_multiplier * streams.noise.standard_normal(total.size)

    if math.isinf(cfg.clip_norm):
        grad_estimate = total / expected_batch
    else:
        grad_estimate = total * (cfg.clip_norm / expected_batch)
    velocity = cfg.momentum * state.momentum_buffer.values + grad_estimate
    new_values = state.params.values - cfg.learning_rate * velocity

    new_params = state.params.with_values(new_values)
    ema = state.ema_params
    if ema is not None and cfg.ema_decay is not None:
        ema = ema.with_values(cfg.ema_decay * ema.values + (1.0 - cfg.ema_decay) * new_values)

    mean_loss = float(losses.mean()) if losses.size else float('nan')
    if losses.size and not math.isfinite(mean_loss):
        raise NumericalFailureError(f"non-finite training loss at step {state.step_index}",
                                    step=state.step_index)
    new_params.check_finite(step=state.step_index)

    stats = StepStats(
        loss=mean_loss,
        batch_size=int(inputs.shape[0]),
        grad_norm_median=float(np.median(norms)) if norms.size else float('nan'),
        clipped_fraction=float(np.mean(norms > cfg.clip_norm)) if norms.size else float('nan'),
    )
    new_state = TrainState(
        params=new_params,
        momentum_buffer=state.momentum_buffer.with_values(velocity),
        ema_params=ema,
        step_index=state.step_index + 1,
        rng_streams=streams,
    )
    return new_state, stats


def dp_sgd_step(state: TrainState, batch: Sequence[Example], model: ModelSpec, cfg: DpSgdConfig,
                dataset_size: int, augmenter: Optional[Augmenter] = None) -> TrainState:
    """
    One DP-SGD update on a (possibly empty) Poisson batch.

    w <- w - lr * v,  v <- momentum * v + (c / B) * (sum_i clip_c(g_i) / c + sigma * xi)

    with B = q * N the expected batch size.
    """
    if batch:
        inputs, labels = stack_examples(batch)
    else:
        inputs, labels = np.zeros((0, model.input_dim)), np.zeros(0, dtype=np.int64)
    new_state, _ = step_on_arrays(state, inputs, labels, model, cfg, dataset_size, augmenter)
    return new_state


def train(model: ModelSpec, params0: ParameterVector, inputs: np.ndarray, labels: np.ndarray,
          cfg: DpSgdConfig, seed: int, metrics_sink: Optional[MetricsSink] = None,
          augmenter: Optional[Augmenter] = None,
          eval_set: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> TrainResult:
    """
    Run exactly cfg.steps DP-SGD steps with Poisson sampling.

    Args:
        model: Model description
        params0: Initial parameters
        inputs: (N, d) training rows
        labels: (N,) class labels
        cfg: DP-SGD settings
        seed: Seed for the sampling, noise and augmentation streams
        metrics_sink: Called with each MetricRow
        augmenter: View generator for augmult
        eval_set: Optional (inputs, labels) evaluated every cfg.eval_every steps and at the end

    Returns:
        TrainResult with final and EMA parameters, the metric log and the mechanism consumed
    """
    n = inputs.shape[0]
    if n == 0:
        raise ConfigError("training set is empty")
    state = TrainState.initial(params0, seed=seed, ema=cfg.ema_decay is not None)
    metrics: List[MetricRow] = []

    for t in range(cfg.steps):
        idx = poisson_sample(n, cfg.sampling_rate, state.rng_streams.sampling)
        state, stats = step_on_arrays(state, inputs[idx], labels[idx], model, cfg, n, augmenter)
        row = MetricRow(
            step=t + 1,
            train_loss=stats.loss,
            grad_norm_median=stats.grad_norm_median,
            clipped_fraction=stats.clipped_fraction,
            batch_size=stats.batch_size,
        )
        last = t + 1 == cfg.steps
        if eval_set is not None and (last or (cfg.eval_every and (t + 1) % cfg.eval_every == 0)):
            row.eval_acc = backprop.accuracy(model, state.params, *eval_set)
        metrics.append(row)
        if metrics_sink is not None:
            metrics_sink(row)
        logger.debug(
            f"step {row.step}/{cfg.steps}: loss={row.train_loss:.4f} batch={row.batch_size} "
            f"clipped={row.clipped_fraction:.2f}"
        )

    logger.info(f"Finished {cfg.steps} {cfg.mode} steps (sigma={cfg.noise_multiplier}, q={cfg.sampling_rate})")
    return TrainResult(
        params=state.params,
        ema_params=state.ema_params,
        metrics=metrics,
        mechanism=cfg.mechanism(),
    )
