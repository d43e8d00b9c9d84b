"""Append-only record of the Gaussian mechanisms a run consumes."""
import logging
import threading
from typing import List, Optional, Sequence, Union

from models.errors import BudgetExceededError, PrivacyDomainError
from models.privacy import (
    AccountingConfig,
    GaussianMechanismSpec,
    GdpParameter,
    PrivacyBudget,
    PrivacyLossDistribution,
    SubsampledGaussianSpec,
)
from models.training import LedgerEntry, Mechanism
from utils import accountant
from utils.privacy_core import compose_gaussians, gdp_delta, gdp_epsilon

logger = logging.getLogger(__name__)


def _as_full_batch(mechanism: Mechanism) -> Optional[GaussianMechanismSpec]:
    if isinstance(mechanism, GaussianMechanismSpec):
        return mechanism
    if mechanism.q == 1.0:
        return GaussianMechanismSpec(noise_multiplier=mechanism.sigma, count=mechanism.steps)
    return None


def _as_subsampled(mechanism: Mechanism) -> SubsampledGaussianSpec:
    if isinstance(mechanism, SubsampledGaussianSpec):
        return mechanism
    return SubsampledGaussianSpec(sigma=mechanism.noise_multiplier, q=1.0, steps=mechanism.count)


def _compose(mechanisms: Sequence[Mechanism],
             cfg: Optional[AccountingConfig]) -> Union[GdpParameter, PrivacyLossDistribution]:
    """Gaussian-DP parameter when every entry is full-batch, else the convolved PLD."""
    full_batch = [_as_full_batch(m) for m in mechanisms]
    if all(m is not None for m in full_batch):
        return compose_gaussians(full_batch)
    cfg = cfg or AccountingConfig()
    total = None
    for mechanism in mechanisms:
        pld = accountant.composed_pld(_as_subsampled(mechanism), cfg)
        total = pld if total is None else accountant.pld_convolve(total, pld, cfg)
    return total


def account_entries(mechanisms: Sequence[Mechanism], delta: float,
                    cfg: Optional[AccountingConfig] = None) -> float:
    """
    Total epsilon at `delta` of a list of mechanisms.

    Full-batch lists close analytically through Gaussian-DP composition;
    anything subsampled is composed on the PLD grid.
    """
    if not mechanisms:
        return 0.0
    composed = _compose(mechanisms, cfg)
    if isinstance(composed, GdpParameter):
        return gdp_epsilon(composed, delta)
    epsilon = accountant.epsilon_for_delta(composed, delta)
    if epsilon == float('inf'):
        raise PrivacyDomainError(f"delta={delta} is unreachable for the ledger entries")
    return epsilon


def account_delta(mechanisms: Sequence[Mechanism], epsilon: float,
                  cfg: Optional[AccountingConfig] = None) -> float:
    """Total delta at `epsilon` of a list of mechanisms."""
    if not epsilon >= 0:
        raise PrivacyDomainError(f"epsilon must be >= 0, got {epsilon}")
    if not mechanisms:
        return 0.0
    composed = _compose(mechanisms, cfg)
    if isinstance(composed, GdpParameter):
        return gdp_delta(composed, epsilon)
    return accountant.delta_for_epsilon(composed, epsilon)


class PrivacyLedger:
    """Mechanisms registered against one (epsilon, delta) budget."""

    def __init__(self, budget: PrivacyBudget, accounting: Optional[AccountingConfig] = None):
        """
        Initialize ledger.

        Args:
            budget: Total (epsilon, delta) the run may spend
            accounting: PLD settings; eps_error is the allowed overshoot
        """
        self.budget = budget
        self.accounting = accounting or AccountingConfig()
        self.entries: List[LedgerEntry] = []
        self.closed_epsilon: Optional[float] = None
        self._lock = threading.Lock()

    @property
    def limit(self) -> float:
        return self.budget.epsilon + self.accounting.eps_error

    def _epsilon_of(self, entries: Sequence[LedgerEntry]) -> float:
        return account_entries([e.mechanism for e in entries], self.budget.delta, self.accounting)

    def register(self, mechanism: Mechanism, purpose: str, enforce: bool = True) -> LedgerEntry:
        """
        Append a mechanism.

        Args:
            mechanism: Gaussian mechanism consumed
            purpose: What it was used for (e.g. 'phase2', 'mean_estimation')
            enforce: Refuse the entry if the ledger would exceed its budget

        Returns:
            The new entry
        """
        entry = LedgerEntry(mechanism=mechanism, purpose=purpose)
        with self._lock:
            if self.closed_epsilon is not None:
                raise BudgetExceededError("ledger is closed")
            if enforce:
                epsilon = self._epsilon_of([*self.entries, entry])
                if epsilon > self.limit:
                    raise BudgetExceededError(
                        f"{purpose} would raise epsilon to {epsilon:.4f}, "
                        f"budget is {self.budget.epsilon} (+{self.accounting.eps_error})"
                    )
            self.entries.append(entry)
        logger.info(f"Ledger: registered {purpose} {mechanism.to_dict()}")
        return entry

    def epsilon(self) -> float:
        with self._lock:
            entries = list(self.entries)
        return self._epsilon_of(entries)

    def close(self) -> float:
        """Account every entry; fails if the total exceeds the budget."""
        with self._lock:
            if self.closed_epsilon is None:
                self.closed_epsilon = self._epsilon_of(self.entries)
            closed = self.closed_epsilon
        if closed > self.limit:
            raise BudgetExceededError(
                f"ledger closed at epsilon={closed:.4f} above budget {self.budget.epsilon}"
            )
        logger.info(f"Ledger closed: epsilon={closed:.4f} at delta={self.budget.delta}")
        return closed

    def purposes(self) -> List[str]:
        return [e.purpose for e in self.entries]

    def to_dict(self) -> dict:
        return {
            'budget': self.budget.to_dict(),
            'eps_error': self.accounting.eps_error,
            'entries': [e.to_dict() for e in self.entries],
            'closed_epsilon': self.closed_epsilon,
        }
