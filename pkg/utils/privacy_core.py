"""Exact privacy arithmetic for the Gaussian mechanism.

The privacy curve of a mu-GDP mechanism is

    delta(eps) = Phi(mu/2 - eps/mu) - exp(eps) * Phi(-mu/2 - eps/mu)

and heterogeneous Gaussian mechanisms on the full dataset compose into a
single one with mu = sqrt(sum_i T_i / sigma_i**2).
"""
import logging
import math
from typing import Iterable, List

from scipy import special

from models.errors import PrivacyDomainError
from models.privacy import GaussianMechanismSpec, GdpParameter

logger = logging.getLogger(__name__)

_BRACKET_Z = 40.0
_EPS_TOLERANCE = 1e-9


def _as_mu(mu) -> float:
    value = mu.mu if isinstance(mu, GdpParameter) else float(mu)
    if not (value > 0 and math.isfinite(value)):
        raise PrivacyDomainError(f"mu must be > 0, got {value}")
    return value


def gdp_delta(mu, epsilon: float) -> float:
    """
    Delta of a mu-GDP mechanism at the given epsilon.

    Both normal CDF terms are taken in log space and the difference is
    formed as Phi(a) * (1 - exp(log(e^eps Phi(b)) - log Phi(a))), which keeps
    full relative precision when the two terms nearly cancel.

    Args:
        mu: GdpParameter or positive float
        epsilon: Nonnegative privacy loss bound

    Returns:
        delta in [0, 1)
    """
    m = _as_mu(mu)
    eps = float(epsilon)
    if not eps >= 0:
        raise PrivacyDomainError(f"epsilon must be >= 0, got {epsilon}")
    if math.isinf(eps):
        return 0.0

    log_first = special.log_ndtr(m / 2.0 - eps / m)
    log_second = eps + special.log_ndtr(-m / 2.0 - eps / m)
    if log_first == -math.inf:
        return 0.0
    diff = log_second - log_first
    if diff >= 0.0:
        return 0.0
    delta = math.exp(log_first) * -math.expm1(diff)
    return min(max(delta, 0.0), math.nextafter(1.0, 0.0))


def gdp_epsilon(mu, delta: float) -> float:
    """
    Smallest epsilon with gdp_delta(mu, epsilon) <= delta, by bisection.

    Args:
        mu: GdpParameter or positive float
        delta: Target delta in (0, 1)

    Returns:
        epsilon (0 when delta already holds at epsilon = 0)
    """
    m = _as_mu(mu)
    if not 0 < delta < 1:
        raise PrivacyDomainError(f"delta must be in (0, 1), got {delta}")
    if gdp_delta(m, 0.0) <= delta:
        return 0.0

    lo = 0.0
    hi = m * m / 2.0 + m * _BRACKET_Z
    while gdp_delta(m, hi) > delta:
        lo = hi
        hi *= 2.0
        if hi > 1e12:
            raise PrivacyDomainError(f"could not bracket epsilon for mu={m}, delta={delta}")

    while hi - lo > _EPS_TOLERANCE:
        mid = 0.5 * (lo + hi)
        if gdp_delta(m, mid) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


def compose_gaussians(mechanisms: Iterable[GaussianMechanismSpec]) -> GdpParameter:
    """
    Compose full-dataset Gaussian mechanisms into one GDP parameter.

    Args:
        mechanisms: Nonempty list of mechanism specs

    Returns:
        GdpParameter with mu = sqrt(sum count / sigma**2)
    """
    items: List[GaussianMechanismSpec] = list(mechanisms)
    if not items:
        raise PrivacyDomainError("cannot compose an empty list of mechanisms")
    total = math.fsum(m.count / (m.noise_multiplier * m.noise_multiplier) for m in items)
    mu = math.sqrt(total)
    logger.debug(f"Composed {len(items)} Gaussian mechanisms into mu={mu:.6g}")
    return GdpParameter(mu)


def calibrate_gaussian_sigma(epsilon: float, delta: float, count: int = 1) -> float:
    """
    Smallest noise multiplier for `count` full-dataset Gaussian releases to be (epsilon, delta)-DP.

    Bisection on mu, then sigma = sqrt(count) / mu.
    """
    if not epsilon > 0:
        raise PrivacyDomainError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise PrivacyDomainError(f"delta must be in (0, 1), got {delta}")
    lo, hi = 0.0, 1.0
    while gdp_delta(hi, epsilon) <= delta:
        lo = hi
        hi *= 2.0
    while hi - lo > 1e-12 * hi:
        mid = 0.5 * (lo + hi)
        if mid > 0 and gdp_delta(mid, epsilon) <= delta:
            lo = mid
        else:
            hi = mid
    if lo <= 0:
        raise PrivacyDomainError("budget too small to calibrate")
    return math.sqrt(count) / lo
