"""Training data models: DP-SGD settings, training state, phase plans and run reports."""
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

from models.errors import ConfigError
from models.network import ParameterVector
from models.privacy import GaussianMechanismSpec, PrivacyBudget, SubsampledGaussianSpec

MODE_PRIVATE = 'private'
MODE_CLIP_ONLY = 'clip_only'
MODE_PLAIN = 'plain'
TRAIN_MODES = (MODE_PRIVATE, MODE_CLIP_ONLY, MODE_PLAIN)

STREAM_NAMES = ('sampling', 'noise', 'augmentation')


@dataclass(frozen=True)
class DpSgdConfig:
    """All DP-SGD hyperparameters of one training phase."""

    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    learning_rate: float = 0.1
    sampling_rate: float = 1.0
    steps: int = 1
    momentum: float = 0.0
    augmult: int = 0
    ema_decay: Optional[float] = 0.999
    mode: str = MODE_PRIVATE
    eval_every: int = 0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"unknown training mode: {self.mode}")
        if self.mode == MODE_CLIP_ONLY:
            object.__setattr__(self, 'noise_multiplier', 0.0)
        if self.mode == MODE_PLAIN:
            object.__setattr__(self, 'noise_multiplier', 0.0)
            object.__setattr__(self, 'clip_norm', math.inf)
        if not self.clip_norm > 0:
            raise ConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.noise_multiplier < 0:
            raise ConfigError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.mode == MODE_PRIVATE and not self.noise_multiplier > 0:
            raise ConfigError("private mode requires noise_multiplier > 0")
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 < self.sampling_rate <= 1:
            raise ConfigError(f"sampling_rate must be in (0, 1], got {self.sampling_rate}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.augmult < 0:
            raise ConfigError(f"augmult must be >= 0, got {self.augmult}")
        if self.ema_decay is not None and not 0 <= self.ema_decay < 1:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")

    @property
    def clipping(self) -> bool:
        return math.isfinite(self.clip_norm)

    def mechanism(self) -> Optional[SubsampledGaussianSpec]:
        """The Gaussian mechanism this configuration consumes (None when not private)."""
        if self.mode != MODE_PRIVATE:
            return None
        return SubsampledGaussianSpec(
            sigma=self.noise_multiplier, q=self.sampling_rate, steps=int(self.steps)
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        if math.isinf(self.clip_norm):
            data['clip_norm'] = 'inf'
        return data


class RngStreams:
    """Named deterministic random streams split from one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(len(STREAM_NAMES))
        self._streams: Dict[str, np.random.Generator] = {
            name: np.random.default_rng(child) for name, child in zip(STREAM_NAMES, children)
        }

    def __getitem__(self, name: str) -> np.random.Generator:
        return self._streams[name]

    @property
    def sampling(self) -> np.random.Generator:
        return self._streams['sampling']

    @property
    def noise(self) -> np.random.Generator:
        return self._streams['noise']

    @property
    def augmentation(self) -> np.random.Generator:
        return self._streams['augmentation']


@dataclass
class TrainState:
    """Parameters, optimizer buffers and random streams between DP-SGD steps."""

    params: ParameterVector
    momentum_buffer: ParameterVector
    ema_params: Optional[ParameterVector]
    step_index: int
    rng_streams: RngStreams

    @classmethod
    def initial(cls, params: ParameterVector, seed: int, ema: bool = True) -> 'TrainState':
        return cls(
            params=params.copy(),
            momentum_buffer=params.zeros_like(),
            ema_params=params.copy() if ema else None,
            step_index=0,
            rng_streams=RngStreams(seed),
        )


@dataclass
class MetricRow:
    """One row of a training metric log."""

    step: int
    train_loss: float
    eval_acc: float = float('nan')
    grad_norm_median: float = float('nan')
    clipped_fraction: float = float('nan')
    batch_size: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


MetricLog = List[MetricRow]


@dataclass(frozen=True)
class PhasePlan:
    """Three-phase schedule sharing one calibrated noise multiplier."""

    budget: PrivacyBudget
    q: float
    T_total: int
    N1: int
    sigma: float
    lr_phase2: float = 1.0
    lr_phase3: float = 0.5
    momentum_phase2: float = 0.9
    momentum_phase3: float = 0.0
    augmult_phase3: int = 0
    epsilon1_report: float = 0.0
    clip_norm: float = 1.0
    ema_decay: Optional[float] = 0.999
    reinit_head_phase3: bool = False
    mode: str = MODE_PRIVATE

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"unknown training mode: {self.mode}")
        if not 0 <= self.N1 <= self.T_total:
            raise ConfigError(f"N1 must lie in [0, T_total={self.T_total}], got {self.N1}")
        if self.T_total < 1:
            raise ConfigError(f"T_total must be >= 1, got {self.T_total}")

    @property
    def N2(self) -> int:
        return self.T_total - self.N1

    @property
    def epsilon1_fraction(self) -> float:
        if self.budget.epsilon == 0:
            return 0.0
        return self.epsilon1_report / self.budget.epsilon

    def phase2_config(self) -> DpSgdConfig:
        return DpSgdConfig(
            clip_norm=self.clip_norm,
            noise_multiplier=self.sigma,
            learning_rate=self.lr_phase2,
            sampling_rate=self.q,
            steps=max(self.N1, 1),
            momentum=self.momentum_phase2,
            augmult=0,
            ema_decay=self.ema_decay,
            mode=self.mode,
        )

    def phase3_config(self) -> DpSgdConfig:
        return DpSgdConfig(
            clip_norm=self.clip_norm,
            noise_multiplier=self.sigma,
            learning_rate=self.lr_phase3,
            sampling_rate=self.q,
            steps=max(self.N2, 1),
            momentum=self.momentum_phase3,
            augmult=self.augmult_phase3,
            ema_decay=self.ema_decay,
            mode=self.mode,
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        data['budget'] = self.budget.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'PhasePlan':
        values = dict(data)
        values['budget'] = PrivacyBudget(**values['budget'])
        return cls(**values)


Mechanism = Union[GaussianMechanismSpec, SubsampledGaussianSpec]


@dataclass(frozen=True)
class LedgerEntry:
    """One Gaussian mechanism consumed, with the reason it was run."""

    mechanism: Mechanism
    purpose: str

    def to_dict(self) -> dict:
        return {'mechanism': self.mechanism.to_dict(), 'purpose': self.purpose}


@dataclass
class RunReport:
    """Outcome of one private training run."""

    method: str
    plan: dict
    ledger: dict
    closed_epsilon: float
    accuracy: float
    ema_accuracy: float
    seed: int
    phase_metrics: Dict[str, str] = field(default_factory=dict)
    phase_accuracy: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0
    inputs_hash: str = ''

    def to_dict(self) -> dict:
        return asdict(self)

    def content(self) -> dict:
        """Report fields that are reproducible bit-exactly (no timings)."""
        data = self.to_dict()
        data.pop('wall_time')
        return data


@dataclass
class TrainResult:
    """Final and EMA parameters of a training run with its metric log."""

    params: ParameterVector
    ema_params: Optional[ParameterVector]
    metrics: MetricLog
    mechanism: Optional[SubsampledGaussianSpec]

    @property
    def eval_params(self) -> ParameterVector:
        return self.ema_params if self.ema_params is not None else self.params


@dataclass(frozen=True)
class LinearProbePlan:
    """Full-batch linear probing on preprocessed features."""

    budget: PrivacyBudget
    sigma: float
    steps: int
    sigma1: float = 0.0
    learning_rate: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 1.0
    ema_decay: Optional[float] = None
    mode: str = MODE_PRIVATE

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"unknown training mode: {self.mode}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.mode == MODE_PRIVATE and self.steps > 0 and not self.sigma > 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")

    def train_config(self) -> DpSgdConfig:
        return DpSgdConfig(
            clip_norm=self.clip_norm,
            noise_multiplier=self.sigma,
            learning_rate=self.learning_rate,
            sampling_rate=1.0,
            steps=max(self.steps, 1),
            momentum=self.momentum,
            ema_decay=self.ema_decay,
            mode=self.mode,
        )

    def mechanism(self) -> Optional[GaussianMechanismSpec]:
        """Full-batch head-training mechanism (None when not private or no steps)."""
        if self.mode != MODE_PRIVATE or self.steps == 0:
            return None
        return GaussianMechanismSpec(noise_multiplier=self.sigma, count=self.steps)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['budget'] = self.budget.to_dict()
        return data


@dataclass
class SweepRow:
    """One allocation sweep point."""

    N1: int
    epsilon1: float
    epsilon1_fraction: float
    accuracy: float = float('nan')
    ema_accuracy: float = float('nan')
    closed_epsilon: float = float('nan')
    seed: int = 0
    error: str = ''

    def to_dict(self) -> dict:
        return asdict(self)
