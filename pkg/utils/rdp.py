"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

Only used as an independent, looser upper bound next to the PLD accountant.
"""
import logging
import math
from typing import Sequence, Tuple

import numpy as np
from scipy import special

from models.errors import PrivacyDomainError

logger = logging.getLogger(__name__)

_MAX_STEPS_LOG_A_FRAC = 1000


def _log_add(logx: float, logy: float) -> float:
    """log(exp(logx) + exp(logy))."""
    a, b = min(logx, logy), max(logx, logy)
    if a == -math.inf:
        return b
    return math.log1p(math.exp(a - b)) + b


def _log_comb(n: float, k: float) -> float:
    return float(special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1))


def _log_erfc(x: float) -> float:
    return math.log(2) + float(special.log_ndtr(-x * math.sqrt(2)))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    log_a = -math.inf
    log1mq = math.log1p(-q)
    for i in range(alpha + 1):
        log_coef = _log_comb(alpha, i) + i * math.log(q) + (alpha - i) * log1mq
        log_a = _log_add(log_a, log_coef + (i * i - i) / (2 * sigma * sigma))
    return log_a


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # the two halves of the integral, split at z0
    log_a0, log_a1 = -math.inf, -math.inf
    z0 = sigma * sigma * math.log(1 / q - 1) + 0.5
    log1mq = math.log1p(-q)
    last_s0 = last_s1 = -math.inf

    for i in range(_MAX_STEPS_LOG_A_FRAC):
        log_coef = _log_comb(alpha, i)
        j = alpha - i
        log_t0 = log_coef + i * math.log(q) + j * log1mq
        log_t1 = log_coef + j * math.log(q) + i * log1mq
        log_e0 = math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma))
        log_e1 = math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma))
        log_s0 = log_t0 + (i * i - i) / (2 * sigma * sigma) + log_e0
        log_s1 = log_t1 + (j * j - j) / (2 * sigma * sigma) + log_e1
        log_a0 = _log_add(log_a0, log_s0)
        log_a1 = _log_add(log_a1, log_s1)
        total = _log_add(log_a0, log_a1)
        if log_s0 < last_s0 and log_s1 < last_s1 and max(log_s0, log_s1) < total - 30:
            return total
        last_s0, last_s1 = log_s0, log_s1

    logger.warning(
        f"RDP series did not converge for q={q}, sigma={sigma}, order={alpha}; "
        f"order excluded"
    )
    return math.inf


def rdp_single_step(q: float, sigma: float, order: float) -> float:
    """RDP of one step of the subsampled Gaussian mechanism at `order`."""
    if q == 1.0:
        return order / (2 * sigma * sigma)
    if math.isinf(order):
        return math.inf
    if float(order).is_integer():
        log_a = _log_a_int(q, sigma, int(order))
    else:
        log_a = _log_a_frac(q, sigma, order)
    return log_a / (order - 1)


def compute_rdp(q: float, sigma: float, steps: int, orders: Sequence[float]) -> np.ndarray:
    """RDP of `steps` compositions at every order."""
    return np.array([rdp_single_step(q, sigma, a) for a in orders]) * steps


def epsilon_from_rdp(orders: Sequence[float], rdp: Sequence[float],
                     delta: float) -> Tuple[float, float]:
    """
    Convert RDP values to an (epsilon, delta) guarantee.

    Uses the tighter conversion eps = r + log1p(-1/a) - log(delta * a) / (a - 1)
    and falls back to the KL bound when it already gives epsilon = 0.

    Returns:
        (epsilon, optimal order)
    """
    eps = []
    for a, r in zip(orders, rdp):
        if a < 1:
            raise PrivacyDomainError(f"Renyi order must be at least 1, got {a}")
        if r < 0:
            value = 0.0
        elif delta ** 2 + math.expm1(-r) > 0:
            value = 0.0
        elif a > 1.01:
            value = r + math.log1p(-1 / a) - math.log(delta * a) / (a - 1)
        else:
            value = math.inf
        eps.append(value)
    best = int(np.argmin(eps))
    return max(0.0, float(eps[best])), float(orders[best])


def rdp_epsilon(q: float, sigma: float, steps: int, delta: float,
                orders: Sequence[float]) -> float:
    """
    Epsilon upper bound for the subsampled Gaussian mechanism via RDP.

    Args:
        q: Sampling rate in (0, 1]
        sigma: Noise multiplier
        steps: Number of compositions
        delta: Target delta
        orders: Renyi orders to optimize over

    Returns:
        Smallest epsilon over the orders
    """
    orders = list(orders)
    if not orders:
        raise PrivacyDomainError("at least one Renyi order is required")
    if not 0 < delta < 1:
        raise PrivacyDomainError(f"delta must be in (0, 1), got {delta}")
    rdp = compute_rdp(q, sigma, steps, orders)
    eps, order = epsilon_from_rdp(orders, rdp, delta)
    logger.debug(f"RDP epsilon={eps:.4f} at order {order} (q={q}, sigma={sigma}, steps={steps})")
    return eps
