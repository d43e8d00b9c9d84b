"""Privacy data models: budgets, mechanisms and privacy loss distributions."""
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from models.errors import PrivacyDomainError


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) target."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise PrivacyDomainError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise PrivacyDomainError(f"delta must be in (0, 1), got {self.delta}")

    def to_dict(self) -> dict:
        return {'epsilon': self.epsilon, 'delta': self.delta}


@dataclass(frozen=True)
class GaussianMechanismSpec:
    """A Gaussian mechanism with unit L2 sensitivity, invoked `count` times on the full dataset."""

    noise_multiplier: float
    count: int = 1

    def __post_init__(self):
        if not self.noise_multiplier > 0:
            raise PrivacyDomainError(
                f"noise_multiplier must be > 0, got {self.noise_multiplier}"
            )
        if self.count < 1:
            raise PrivacyDomainError(f"count must be >= 1, got {self.count}")

    def to_dict(self) -> dict:
        return {'kind': 'gaussian', 'noise_multiplier': self.noise_multiplier, 'count': self.count}


@dataclass(frozen=True)
class GdpParameter:
    """Gaussian-DP parameter mu of a (composed) Gaussian mechanism."""

    mu: float

    def __post_init__(self):
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise PrivacyDomainError(f"mu must be a positive finite number, got {self.mu}")

    @property
    def effective_sigma(self) -> float:
        """Noise multiplier of the equivalent one-step mechanism."""
        return 1.0 / self.mu


@dataclass(frozen=True)
class SubsampledGaussianSpec:
    """Poisson-subsampled Gaussian mechanism run for `steps` rounds."""

    sigma: float
    q: float
    steps: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise PrivacyDomainError(f"sigma must be > 0, got {self.sigma}")
        if not 0 < self.q <= 1:
            raise PrivacyDomainError(f"sampling rate q must be in (0, 1], got {self.q}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise PrivacyDomainError(f"steps must be a positive integer, got {self.steps}")

    def with_steps(self, steps: int) -> 'SubsampledGaussianSpec':
        return SubsampledGaussianSpec(sigma=self.sigma, q=self.q, steps=steps)

    def to_dict(self) -> dict:
        return {'kind': 'subsampled_gaussian', 'sigma': self.sigma, 'q': self.q, 'steps': self.steps}


@dataclass(frozen=True)
class AccountingConfig:
    """Discretization settings for privacy loss distribution accounting."""

    grid_spacing: float = 1e-4
    eps_error: float = 0.01
    tail_bound: float = 1e-12
    max_grid_points: int = 2 ** 24

    def __post_init__(self):
        if not (self.grid_spacing > 0 and self.eps_error > 0 and self.tail_bound > 0):
            raise PrivacyDomainError("accounting parameters must be positive")
        if self.tail_bound >= 1:
            raise PrivacyDomainError("tail_bound must be < 1")

    @classmethod
    def from_config(cls) -> 'AccountingConfig':
        from config import Config
        return cls(
            grid_spacing=Config.PLD_GRID_SPACING,
            eps_error=Config.PLD_EPS_ERROR,
            tail_bound=Config.PLD_TAIL_BOUND,
            max_grid_points=Config.PLD_MAX_GRID_POINTS,
        )


DIRECTION_REMOVE = 'remove'
DIRECTION_ADD = 'add'
DIRECTION_WORST_CASE = 'add_remove_worst_case'


@dataclass
class PrivacyLossDistribution:
    """Discretized privacy loss random variable.

    Grid point k sits at privacy loss ``(min_index + k) * grid_spacing`` and
    carries ``masses[k]``; ``truncation_mass`` is the probability placed at
    +infinity. A worst-case distribution keeps the remove direction in the
    main fields and the add direction in ``reverse``.
    """

    grid_spacing: float
    min_index: int
    masses: np.ndarray
    truncation_mass: float = 0.0
    direction: str = DIRECTION_REMOVE
    reverse: Optional['PrivacyLossDistribution'] = field(default=None, repr=False)

    @property
    def origin(self) -> float:
        """Privacy loss value of the first grid point."""
        return self.min_index * self.grid_spacing

    @property
    def losses(self) -> np.ndarray:
        return (self.min_index + np.arange(self.masses.size)) * self.grid_spacing

    def total_mass(self) -> float:
        return float(self.masses.sum() + self.truncation_mass)

    def components(self):
        """Yield the single-direction distributions this one is made of."""
        yield self
        if self.reverse is not None:
            yield self.reverse
