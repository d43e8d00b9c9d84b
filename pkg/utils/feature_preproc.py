"""Feature extraction, fixed-norm normalization and private mean centering for linear probing."""
import logging
from typing import Optional, Tuple

import numpy as np

from models.data import FeatureMatrix, PreprocConfig
from models.errors import ConfigError, ShapeError
from models.network import KIND_ENCODER, ModelSpec, ParameterVector
from models.privacy import GaussianMechanismSpec
from utils import backprop

logger = logging.getLogger(__name__)


def _pool(activations: np.ndarray, stride: int) -> np.ndarray:
    """Mean-pool consecutive groups of `stride` units (a ragged last group is kept)."""
    if stride == 1:
        return activations
    d = activations.shape[1]
    starts = np.arange(0, d, stride)
    return np.add.reduceat(activations, starts, axis=1) / np.diff(np.append(starts, d))


def extract_features(encoder: ModelSpec, params: ParameterVector, inputs: np.ndarray,
                     cfg: PreprocConfig, provenance: Optional[dict] = None) -> FeatureMatrix:
    """
    Frozen-encoder features for linear probing.

    Args:
        encoder: Encoder description (at least one hidden layer)
        params: Encoder parameters
        inputs: (N, d) flattened images
        cfg: block_concat concatenates every pooled hidden layer, otherwise
            the last hidden layer is used as is
        provenance: Extra provenance recorded on the matrix

    Returns:
        FeatureMatrix of shape (N, dim)
    """
    if encoder.kind != KIND_ENCODER or not encoder.hidden_dims:
        raise ShapeError("feature extraction needs an encoder with hidden layers")
    hidden = backprop.hidden_activations(encoder, params, inputs)
    if cfg.block_concat:
        rows = np.concatenate([_pool(h, cfg.pool_stride) for h in hidden], axis=1)
    else:
        rows = hidden[-1]
    info = {'block_concat': cfg.block_concat, 'pool_stride': cfg.pool_stride}
    info.update(provenance or {})
    return FeatureMatrix(rows=rows, provenance=info)


def normalize_to_norm(features: FeatureMatrix, C: float) -> FeatureMatrix:
    """Rescale every row to L2 norm C."""
    if not C > 0:
        raise ConfigError(f"norm C must be > 0, got {C}")
    norms = np.linalg.norm(features.rows, axis=1)
    if np.any(norms == 0.0):
        raise ShapeError(f"{int(np.sum(norms == 0.0))} feature rows are zero; cannot normalize")
    return features.replace(features.rows * (C / norms)[:, None], norm_C=C)


def private_mean(features: FeatureMatrix, C: float, sigma1: float, noise_rng: np.random.Generator,
                 accounting: bool = True) -> Tuple[np.ndarray, Optional[GaussianMechanismSpec]]:
    """
    Gaussian-mechanism estimate of the mean of norm-C rows.

    The mean has L2 sensitivity C / N, so the noise std per coordinate is sigma1 * C / N.

    Args:
        features: Rows normalized to norm C
        C: Row norm
        sigma1: Noise multiplier
        noise_rng: Noise stream
        accounting: When True a zero sigma1 is refused

    Returns:
        (noisy mean, mechanism record or None when no noise was added)
    """
    n = features.n
    if n < 1:
        raise ShapeError("cannot estimate the mean of an empty matrix")
    if sigma1 < 0:
        raise ConfigError(f"sigma1 must be >= 0, got {sigma1}")
    norms = np.linalg.norm(features.rows, axis=1)
    if not np.allclose(norms, C, rtol=1e-9, atol=1e-9 * C):
        raise ShapeError("private_mean expects rows normalized to norm C")

    mean = features.rows.mean(axis=0)
    if sigma1 == 0:
        if accounting:
            raise ConfigError("sigma1 = 0 would release the exact mean while accounting is on")
        return mean, None

    sensitivity = C / n
    noisy = mean + sigma1 * sensitivity * noise_rng.standard_normal(features.dim)
    logger.info(f"Private mean over {n} rows: sigma1={sigma1}, sensitivity={sensitivity:.3e}")
    return noisy, GaussianMechanismSpec(noise_multiplier=sigma1, count=1)


def center(features: FeatureMatrix, mean_vector: np.ndarray) -> FeatureMatrix:
    """Subtract a mean vector from every row."""
    mean_vector = np.asarray(mean_vector, dtype=np.float64)
    if mean_vector.shape != (features.dim,):
        raise ShapeError(f"mean has shape {mean_vector.shape}, features have dim {features.dim}")
    return features.replace(features.rows - mean_vector, centered=True)


def preprocess(features: FeatureMatrix, cfg: PreprocConfig, noise_rng: np.random.Generator,
               accounting: bool = True) -> Tuple[FeatureMatrix, np.ndarray, Optional[GaussianMechanismSpec]]:
    """
    normalize -> private mean -> center (-> optional renormalize).

    With sigma1 = 0 and accounting on the mean step is skipped entirely.

    Returns:
        (processed features, mean used for centering, mechanism or None)
    """
    normalized = normalize_to_norm(features, cfg.norm_C)
    if cfg.sigma1 == 0 and accounting:
        return normalized, np.zeros(normalized.dim), None
    mean, mechanism = private_mean(normalized, cfg.norm_C, cfg.sigma1, noise_rng, accounting)
    out = center(normalized, mean)
    if cfg.renormalize_after_center:
        out = normalize_to_norm(out, cfg.norm_C)
    return out, mean, mechanism


def apply_preprocessing(features: FeatureMatrix, mean_vector: np.ndarray,
                        cfg: PreprocConfig) -> FeatureMatrix:
    """Apply an already released mean to further rows (e.g. a test split); no privacy cost."""
    out = center(normalize_to_norm(features, cfg.norm_C), mean_vector)
    if cfg.renormalize_after_center:
        out = normalize_to_norm(out, cfg.norm_C)
    return out
