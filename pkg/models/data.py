"""Image, generator and feature data models."""
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from models.errors import ConfigError, ShapeError

GENERATOR_DEFAULTS: Dict[str, dict] = {
    'dead_leaves': {
        'shapes': ['disk', 'rect'],
        'radius_min': 0.03,
        'radius_max': 0.5,
        'radius_exponent': 3.0,
        'count_min': 20,
        'count_max': 60,
    },
    'spectral_noise': {
        'alpha_min': 0.5,
        'alpha_max': 3.0,
    },
    'color_mixture': {
        'components_min': 2,
        'components_max': 6,
        'width_min': 0.1,
        'width_max': 0.5,
    },
}


@dataclass(frozen=True)
class GeneratorSpec:
    """Random-process image generator; unspecified params take the family defaults."""

    kind: str
    image_size: int = 16
    channels: int = 3
    params: Dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GENERATOR_DEFAULTS:
            raise ConfigError(f"unknown generator kind: {self.kind}")
        if self.image_size < 2:
            raise ConfigError(f"image_size must be >= 2, got {self.image_size}")
        if self.channels != 3:
            raise ConfigError(f"generators produce 3 channels, got {self.channels}")
        unknown = set(self.params) - set(GENERATOR_DEFAULTS[self.kind])
        if unknown:
            raise ConfigError(f"unknown {self.kind} parameters: {sorted(unknown)}")

    def param(self, name: str):
        return self.params.get(name, GENERATOR_DEFAULTS[self.kind][name])

    def with_seed(self, seed: int) -> 'GeneratorSpec':
        return GeneratorSpec(self.kind, self.image_size, self.channels, dict(self.params), seed)

    @property
    def input_dim(self) -> int:
        return self.image_size * self.image_size * self.channels

    def to_dict(self) -> dict:
        return {
            'kind': self.kind,
            'image_size': self.image_size,
            'channels': self.channels,
            'params': dict(self.params),
            'seed': self.seed,
        }


@dataclass
class ImageTensor:
    """H x W x C image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ShapeError(f"image must be H x W x C, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ShapeError("image values must lie in [0, 1]")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape

    def flatten(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class AugmentConfig:
    """Settings for contrastive views and augmentation multiplicity."""

    crop_scale: Tuple[float, float] = (0.4, 1.0)
    flip_p: float = 0.5
    jitter: float = 0.2

    @classmethod
    def identity(cls) -> 'AugmentConfig':
        return cls(crop_scale=(1.0, 1.0), flip_p=0.0, jitter=0.0)

    @property
    def is_identity(self) -> bool:
        return tuple(self.crop_scale) == (1.0, 1.0) and self.flip_p == 0.0 and self.jitter == 0.0


@dataclass(frozen=True)
class ContrastiveConfig:
    """Phase I pretraining settings."""

    batch_size: int = 64
    steps: int = 200
    learning_rate: float = 0.5
    align_weight: float = 1.0
    uniform_weight: float = 1.0
    t: float = 2.0
    momentum: float = 0.9
    log_every: int = 10

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("contrastive batch_size must be >= 2")
        if self.steps < 0:
            raise ConfigError("contrastive steps must be >= 0")
        for name in ('learning_rate', 'align_weight', 'uniform_weight', 't'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"contrastive {name} must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("contrastive momentum must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PreprocConfig:
    """Feature preprocessing for linear probing."""

    norm_C: float = 50.0
    sigma1: float = 0.0
    block_concat: bool = False
    pool_stride: int = 1
    renormalize_after_center: bool = False

    def __post_init__(self):
        if not self.norm_C > 0:
            raise ConfigError(f"norm_C must be > 0, got {self.norm_C}")
        if self.sigma1 < 0:
            raise ConfigError(f"sigma1 must be >= 0, got {self.sigma1}")
        if self.pool_stride < 1:
            raise ConfigError(f"pool_stride must be >= 1, got {self.pool_stride}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeatureMatrix:
    """N x d feature rows plus where they came from."""

    rows: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ShapeError(f"features must be N x d, got shape {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ShapeError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def replace(self, rows: np.ndarray, **provenance) -> 'FeatureMatrix':
        return FeatureMatrix(rows=rows, provenance={**self.provenance, **provenance})


@dataclass
class LabeledImages:
    """A labelled image set stored as flattened rows."""

    inputs: np.ndarray
    labels: np.ndarray
    image_size: int
    channels: int = 3
    meta: Optional[dict] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError("inputs must be N x d with one label per row")
        if self.inputs.shape[1] != self.image_size * self.image_size * self.channels:
            raise ShapeError("input rows do not match the image shape")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0
