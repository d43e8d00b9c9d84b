"""Images from random processes and contrastive pretraining on them.

Nothing in this module touches private data, so it consumes no privacy budget.
"""
import logging
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from models.data import AugmentConfig, ContrastiveConfig, GeneratorSpec, ImageTensor, LabeledImages
from models.errors import ConfigError, NumericalFailureError, ShapeError
from models.network import KIND_ENCODER, ModelSpec, ParameterVector
from utils import backprop

logger = logging.getLogger(__name__)


def _pixel_grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5) / size
    return np.meshgrid(coords, coords, indexing='ij')


def _power_law_radius(rng: np.random.Generator, r_min: float, r_max: float, exponent: float) -> float:
    """Sample r with density proportional to r**-exponent on [r_min, r_max]."""
    u = rng.random()
    if r_min == r_max:
        return r_min
    if math.isclose(exponent, 1.0):
        return r_min * (r_max / r_min) ** u
    a = 1.0 - exponent
    return (r_min ** a + u * (r_max ** a - r_min ** a)) ** (1.0 / a)


def _dead_leaves(spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    yy, xx = _pixel_grid(size)
    image = np.empty((size, size, 3))
    image[:] = rng.random(3)
    shapes = list(spec.param('shapes'))
    count = int(rng.integers(spec.param('count_min'), spec.param('count_max') + 1))
    for _ in range(count):
        radius = _power_law_radius(
            rng, spec.param('radius_min'), spec.param('radius_max'), spec.param('radius_exponent')
        )
        cy, cx = rng.random(2)
        color = rng.random(3)
        shape = shapes[int(rng.integers(len(shapes)))]
        if shape == 'disk':
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
        elif shape == 'rect':
            aspect = rng.uniform(0.5, 1.5)
            mask = (np.abs(yy - cy) <= radius * aspect) & (np.abs(xx - cx) <= radius / aspect)
        else:
            raise ConfigError(f"unknown dead_leaves shape: {shape}")
        # later leaves occlude earlier ones
        image[mask] = color
    return image


def _spectral_noise(spec: GeneratorSpec, rng: np.random.Generator,
                    alpha: Optional[float] = None) -> np.ndarray:
    size = spec.image_size
    if alpha is None:
        alpha = rng.uniform(spec.param('alpha_min'), spec.param('alpha_max'))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    freq = np.sqrt(fx * fx + fy * fy)
    freq[0, 0] = 1.0
    magnitude = freq ** -alpha
    magnitude[0, 0] = 0.0

    image = np.empty((size, size, 3))
    for c in range(3):
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(size, size))
        channel = np.real(np.fft.ifft2(magnitude * np.exp(1j * phase)))
        lo, hi = channel.min(), channel.max()
        image[:, :, c] = (channel - lo) / (hi - lo) if hi > lo else 0.5
    return image


def _color_mixture(spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    yy, xx = _pixel_grid(size)
    k = int(rng.integers(spec.param('components_min'), spec.param('components_max') + 1))
    weights = np.full((size, size), 1e-3)
    field = 1e-3 * rng.random(3) * np.ones((size, size, 3))
    for _ in range(k):
        cy, cx = rng.random(2)
        width = rng.uniform(spec.param('width_min'), spec.param('width_max'))
        color = rng.random(3)
        g = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width * width))
        weights = weights + g
        field = field + g[:, :, None] * color
    return np.clip(field / weights[:, :, None], 0.0, 1.0)


def generate_one(spec: GeneratorSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == 'dead_leaves':
        return _dead_leaves(spec, rng)
    if spec.kind == 'spectral_noise':
        return _spectral_noise(spec, rng)
    return _color_mixture(spec, rng)


def image_streams(seed: int, n: int) -> List[np.random.Generator]:
    """One independent stream per image index."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(n)]


def generate(spec: GeneratorSpec, n: int) -> List[ImageTensor]:
    """
    Generate n images from the random process described by `spec`.

    Args:
        spec: Generator family, size, parameters and seed
        n: Number of images

    Returns:
        List of images with values in [0, 1], deterministic per (spec, n)
    """
    if n < 1:
        raise ConfigError(f"number of images must be >= 1, got {n}")
    images = [ImageTensor(generate_one(spec, rng)) for rng in image_streams(spec.seed, n)]
    logger.debug(f"Generated {n} {spec.kind} images of size {spec.image_size}")
    return images


def generate_array(spec: GeneratorSpec, n: int) -> np.ndarray:
    """Generated images as flattened (n, H*W*C) rows."""
    return np.stack([img.flatten() for img in generate(spec, n)])


def make_private_dataset(spec: GeneratorSpec, n: int, seed: int, num_classes: int = 3,
                         band_gap: float = 0.2) -> LabeledImages:
    """
    Labelled spectral-noise images whose class is the spectral exponent band.

    The [alpha_min, alpha_max] range is split into `num_classes` equal bands;
    the last `band_gap` fraction of every band is left out so classes do not touch.
    """
    if spec.kind != 'spectral_noise':
        raise ConfigError("the private dataset is drawn from the spectral_noise family")
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    lo, hi = spec.param('alpha_min'), spec.param('alpha_max')
    width = (hi - lo) / num_classes

    label_rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    labels = label_rng.permutation(np.arange(n) % num_classes)
    rows = np.empty((n, spec.input_dim))
    for i, rng in enumerate(image_streams(seed, n)):
        k = int(labels[i])
        alpha = rng.uniform(lo + k * width, lo + (k + 1 - band_gap) * width)
        rows[i] = _spectral_noise(spec, rng, alpha=alpha).reshape(-1)

    meta = {'generator': spec.to_dict(), 'seed': seed, 'num_classes': num_classes, 'band_gap': band_gap}
    logger.info(f"Built private dataset: {n} images, {num_classes} spectral bands")
    return LabeledImages(inputs=rows, labels=labels, image_size=spec.image_size, meta=meta)


def augment(image: ImageTensor, rng: np.random.Generator,
            cfg: Optional[AugmentConfig] = None) -> ImageTensor:
    """
    Random resized crop, horizontal flip and per-channel brightness/contrast jitter.

    Args:
        image: Input image
        rng: Augmentation stream
        cfg: Augmentation settings; AugmentConfig.identity() returns the input unchanged

    Returns:
        Augmented image of the same shape, values in [0, 1]
    """
    cfg = cfg or AugmentConfig()
    data = image.data
    if cfg.is_identity:
        return ImageTensor(data.copy())
    h, w, _ = data.shape

    scale = rng.uniform(*cfg.crop_scale)
    side = max(2, min(h, int(round(math.sqrt(scale) * h))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = data[top:top + side, left:left + side]
    if side != h:
        out = ndimage.zoom(out, (h / side, w / side, 1), order=1)

    if rng.random() < cfg.flip_p:
        out = out[:, ::-1]

    if cfg.jitter > 0:
        brightness = rng.uniform(-cfg.jitter, cfg.jitter, size=3)
        contrast = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter, size=3)
        mean = out.mean(axis=(0, 1))
        out = (out - mean) * contrast + mean + brightness
    return ImageTensor(np.clip(out, 0.0, 1.0))


class Augmenter:
    """Augments flattened image rows (used for contrastive views and augmult)."""

    def __init__(self, image_size: int, channels: int = 3, cfg: Optional[AugmentConfig] = None):
        self.image_size = image_size
        self.channels = channels
        self.cfg = cfg or AugmentConfig()

    def __call__(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        image = ImageTensor(x.reshape(self.image_size, self.image_size, self.channels))
        return augment(image, rng, self.cfg).flatten()


def alignment_uniformity_loss(emb_pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                              t: float = 2.0) -> Tuple[float, float]:
    """
    Alignment and uniformity of paired unit embeddings.

    align = mean ||a - b||^2 over the pairs; uniform = log of the mean of
    exp(-t ||x - y||^2) over all distinct pairs of the pooled 2n embeddings.
    """
    if len(emb_pairs) < 2:
        raise ShapeError("need at least two embedding pairs")
    a = np.stack([np.asarray(p[0], dtype=np.float64) for p in emb_pairs])
    b = np.stack([np.asarray(p[1], dtype=np.float64) for p in emb_pairs])
    align, uniform, _, _ = _contrastive_terms(a, b, t)
    return align, uniform


def _contrastive_terms(a: np.ndarray, b: np.ndarray, t: float):
    """
    Loss terms with their gradients.

    Returns:
        (align, uniform, d align / d a (equal to -d align / d b), d uniform / d [a; b])
    """
    pooled = np.concatenate([a, b])
    norms = np.linalg.norm(pooled, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ShapeError("embeddings must have unit norm")

    n = a.shape[0]
    diff = a - b
    align = float(np.mean(np.sum(diff * diff, axis=1)))
    grad_align = 2.0 * diff / n

    m = pooled.shape[0]
    gram = pooled @ pooled.T
    sq = np.maximum(2.0 - 2.0 * gram, 0.0)
    kernel = np.exp(-t * sq)
    np.fill_diagonal(kernel, 0.0)
    pairs = m * (m - 1) / 2.0
    total = kernel.sum() / 2.0
    uniform = float(np.log(total / pairs))
    grad_uniform = (-2.0 * t / total) * (kernel.sum(axis=1)[:, None] * pooled - kernel @ pooled)
    return align, uniform, grad_align, grad_uniform


def pretrain_encoder(gen: GeneratorSpec, model: ModelSpec, cfg: ContrastiveConfig,
                     seed: int, params0: Optional[ParameterVector] = None,
                     augment_cfg: Optional[AugmentConfig] = None, pool_size: int = 2048,
                     metrics_sink: Optional[Callable[[dict], None]] = None) -> ParameterVector:
    """
    Train the encoder on synthetic images with the alignment/uniformity objective.

    Plain momentum SGD on public data: no clipping, no noise.

    Args:
        gen: Synthetic image generator
        model: Encoder description
        cfg: Contrastive training settings
        seed: Seed for initialization, batch selection and augmentation
        params0: Starting parameters (random initialization when omitted)
        augment_cfg: View augmentation settings
        pool_size: Number of synthetic images drawn up front
        metrics_sink: Called with {'step', 'align', 'uniform', 'loss'} every cfg.log_every steps

    Returns:
        Trained encoder parameters
    """
    if model.kind != KIND_ENCODER:
        raise ShapeError(f"pretraining needs an encoder, got {model.kind}")
    if model.input_dim != gen.input_dim:
        raise ShapeError(f"encoder input {model.input_dim} does not match images {gen.input_dim}")

    children = np.random.SeedSequence(seed).spawn(3)
    init_rng, batch_rng, aug_rng = (np.random.default_rng(c) for c in children)
    params = params0.copy() if params0 is not None else backprop.init_params(model, init_rng)
    if cfg.steps == 0:
        return params

    pool = generate_array(gen.with_seed(seed), max(pool_size, cfg.batch_size))
    augmenter = Augmenter(gen.image_size, gen.channels, augment_cfg)
    velocity = np.zeros(params.size)
    logger.info(f"Pretraining encoder on {gen.kind} for {cfg.steps} steps")

    for step in range(1, cfg.steps + 1):
        idx = batch_rng.choice(pool.shape[0], size=cfg.batch_size, replace=False)
        view_a = np.stack([augmenter(x, aug_rng) for x in pool[idx]])
        view_b = np.stack([augmenter(x, aug_rng) for x in pool[idx]])

        cache = backprop.forward_cache(model, params, np.concatenate([view_a, view_b]))
        emb = cache['output']
        align, uniform, grad_align, grad_uniform = _contrastive_terms(
            emb[:cfg.batch_size], emb[cfg.batch_size:], cfg.t
        )
        loss_value = cfg.align_weight * align + cfg.uniform_weight * uniform
        if not math.isfinite(loss_value):
            raise NumericalFailureError(f"non-finite contrastive loss at step {step}", step=step)

        upstream = cfg.uniform_weight * grad_uniform
        upstream[:cfg.batch_size] += cfg.align_weight * grad_align
        upstream[cfg.batch_size:] -= cfg.align_weight * grad_align
        grad = backprop.backward(model, params, cache, upstream, per_sample=False)
        velocity = cfg.momentum * velocity + grad
        params = params.with_values(params.values - cfg.learning_rate * velocity)
        params.check_finite(step=step)

        if step % cfg.log_every == 0 or step == cfg.steps:
            norms = np.linalg.norm(emb, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise NumericalFailureError("encoder output left the unit sphere", step=step)
            record = {'step': step, 'align': align, 'uniform': uniform, 'loss': loss_value}
            if metrics_sink is not None:
                metrics_sink(record)
            logger.debug(f"pretrain step {step}: align={align:.4f} uniform={uniform:.4f}")

    return params


def contrastive_loss(model: ModelSpec, params: ParameterVector, view_a: np.ndarray,
                     view_b: np.ndarray, cfg: ContrastiveConfig) -> float:
    """Weighted alignment + uniformity of an encoder on given view pairs."""
    emb_a = backprop.forward_batch(model, params, view_a)
    emb_b = backprop.forward_batch(model, params, view_b)
    align, uniform, _, _ = _contrastive_terms(emb_a, emb_b, cfg.t)
    return cfg.align_weight * align + cfg.uniform_weight * uniform
