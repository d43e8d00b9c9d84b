"""Privacy accounting for Poisson-subsampled Gaussian mechanisms.

A single step of the mechanism is turned into a discrete privacy loss
distribution (PLD) on a uniform loss grid for both the remove and the add
neighbouring direction. The discretization connects the dots of the exact
hockey-stick curve at the grid points, which never underestimates delta.
T-fold composition is FFT convolution with repeated squaring; after every
convolution the upper tail is moved to +infinity and the lower tail onto the
lowest kept grid point, both of which only increase delta.
"""
import logging
import math
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy import signal, special

from models.errors import CalibrationError, PldOverflowError, PrivacyDomainError
from models.privacy import (
    DIRECTION_ADD,
    DIRECTION_REMOVE,
    DIRECTION_WORST_CASE,
    AccountingConfig,
    PrivacyLossDistribution,
    SubsampledGaussianSpec,
)
from utils import rdp
from utils.privacy_core import calibrate_gaussian_sigma, gdp_epsilon

logger = logging.getLogger(__name__)

SIGMA_GRID = 0.1


def gaussian_curve(mu: float, epsilons: np.ndarray) -> np.ndarray:
    """Hockey-stick curve of N(mu, 1) vs N(0, 1) at arbitrary real epsilons (vectorized)."""
    eps = np.asarray(epsilons, dtype=np.float64)
    log_first = special.log_ndtr(mu / 2.0 - eps / mu)
    log_second = eps + special.log_ndtr(-mu / 2.0 - eps / mu)
    with np.errstate(invalid='ignore', over='ignore'):
        delta = np.exp(log_first) * -np.expm1(np.minimum(log_second - log_first, 0.0))
    return np.nan_to_num(np.clip(delta, 0.0, 1.0), nan=0.0)


def _remove_curve(sigma: float, q: float, epsilons: np.ndarray) -> np.ndarray:
    """delta(eps) for P = (1-q) N(0, s^2) + q N(1, s^2) against Q = N(0, s^2)."""
    mu = 1.0 / sigma
    eps = np.asarray(epsilons, dtype=np.float64)
    if q == 1.0:
        return gaussian_curve(mu, eps)
    out = -np.expm1(eps)
    valid = eps > math.log1p(-q)
    shifted = np.log1p(np.expm1(eps[valid]) / q)
    out[valid] = q * gaussian_curve(mu, shifted)
    return np.clip(out, 0.0, 1.0)


def _add_curve(sigma: float, q: float, epsilons: np.ndarray) -> np.ndarray:
    """delta(eps) for P = N(0, s^2) against Q = (1-q) N(0, s^2) + q N(1, s^2)."""
    mu = 1.0 / sigma
    eps = np.asarray(epsilons, dtype=np.float64)
    if q == 1.0:
        return gaussian_curve(mu, eps)
    out = np.zeros_like(eps)
    valid = eps < -math.log1p(-q)
    e = eps[valid]
    shifted = -np.log1p(np.expm1(-e) / q)
    scale = -np.expm1(e) + q * np.exp(e)
    out[valid] = scale * gaussian_curve(mu, shifted)
    return np.clip(out, 0.0, 1.0)


def _loss_range(spec: SubsampledGaussianSpec, direction: str, tail_bound: float):
    """Privacy loss values covering all but `tail_bound` of the mass on each side."""
    z = -special.ndtri(tail_bound)
    sigma, q = spec.sigma, spec.q

    def loss(x: float) -> float:
        base = (2.0 * x - 1.0) / (2.0 * sigma * sigma)
        if q == 1.0:
            return base
        # log(1 - q + q e^base), evaluated without overflow
        value = np.logaddexp(math.log1p(-q), math.log(q) + base)
        return float(value)

    if direction == DIRECTION_REMOVE:
        return loss(-z * sigma), loss(1.0 + z * sigma)
    return -loss(z * sigma), -loss(-z * sigma)


def _connect_dots(curve: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                  direction: str, cfg: AccountingConfig) -> PrivacyLossDistribution:
    """
    Discrete PLD whose hockey-stick curve passes through curve(eps_k) at every grid point.

    Between grid points the discrete curve is linear in exp(eps), which lies
    above the convex true curve.
    """
    spacing = cfg.grid_spacing
    i_lo = int(math.floor(lo / spacing))
    i_hi = int(math.ceil(hi / spacing))
    if i_hi <= i_lo:
        i_hi = i_lo + 1
    size = i_hi - i_lo + 1
    if size > cfg.max_grid_points:
        raise PldOverflowError(
            f"single-step loss grid needs {size} points, max is {cfg.max_grid_points}"
        )

    eps = (i_lo + np.arange(size)) * spacing
    deltas = curve(eps)
    gaps = np.exp(eps[:-1]) * math.expm1(spacing)
    slopes = np.diff(deltas) / gaps

    masses = np.zeros(size)
    masses[1:-1] = np.exp(eps[1:-1]) * np.diff(slopes)
    masses[-1] = -np.exp(eps[-1]) * slopes[-1]
    masses = np.clip(masses, 0.0, None)
    truncation = float(deltas[-1])
    excess = truncation + masses[1:].sum() - 1.0
    if excess > 0:
        # rounding overshoot: take it from the lowest losses, where it never raises delta
        before = np.cumsum(masses) - masses
        masses -= np.clip(excess - before, 0.0, masses)
    else:
        masses[0] = -excess

    return PrivacyLossDistribution(
        grid_spacing=spacing,
        min_index=i_lo,
        masses=masses,
        truncation_mass=truncation,
        direction=direction,
    )


def pld_of_subsampled_gaussian(spec: SubsampledGaussianSpec,
                               cfg: Optional[AccountingConfig] = None) -> PrivacyLossDistribution:
    """
    Single-step worst-case PLD of the Poisson-subsampled Gaussian mechanism.

    Args:
        spec: Mechanism spec; `steps` must be 1
        cfg: Discretization settings

    Returns:
        PLD for the remove direction with the add direction in `reverse`
    """
    cfg = cfg or AccountingConfig()
    if spec.steps != 1:
        raise PrivacyDomainError(f"single-step PLD requested with steps={spec.steps}")

    def curve_for(direction):
        if direction == DIRECTION_REMOVE:
            return lambda e: _remove_curve(spec.sigma, spec.q, e)
        return lambda e: _add_curve(spec.sigma, spec.q, e)

    parts = {}
    for direction in (DIRECTION_REMOVE, DIRECTION_ADD):
        lo, hi = _loss_range(spec, direction, cfg.tail_bound)
        parts[direction] = _connect_dots(curve_for(direction), lo, hi, direction, cfg)

    worst = parts[DIRECTION_REMOVE]
    worst.direction = DIRECTION_WORST_CASE
    worst.reverse = parts[DIRECTION_ADD]
    logger.debug(
        f"PLD for sigma={spec.sigma}, q={spec.q}: "
        f"{worst.masses.size} + {worst.reverse.masses.size} grid points"
    )
    return worst


def _truncate_tails(masses: np.ndarray, min_index: int, truncation: float, tail_bound: float):
    """Move lower-tail mass up onto the first kept point and upper-tail mass to +infinity."""
    masses = np.clip(masses, 0.0, None)
    lower = np.cumsum(masses)
    first = int(np.searchsorted(lower, tail_bound, side='right'))
    first = min(first, masses.size - 1)
    upper = np.cumsum(masses[::-1])
    cut = int(np.searchsorted(upper, tail_bound, side='right'))
    last = max(masses.size - 1 - cut, first)

    kept = masses[first:last + 1].copy()
    kept[0] += masses[:first].sum()
    truncation = truncation + masses[last + 1:].sum()
    return kept, min_index + first, truncation


def _convolve_single(a: PrivacyLossDistribution, b: PrivacyLossDistribution,
                     cfg: AccountingConfig) -> PrivacyLossDistribution:
    if not math.isclose(a.grid_spacing, b.grid_spacing, rel_tol=1e-12):
        raise PrivacyDomainError("cannot compose PLDs on different grids")
    size = a.masses.size + b.masses.size - 1
    if size > cfg.max_grid_points:
        raise PldOverflowError(
            f"composed PLD needs {size} grid points, max is {cfg.max_grid_points}; "
            f"widen the grid spacing or raise max_grid_points"
        )
    masses = signal.fftconvolve(a.masses, b.masses)
    truncation = a.truncation_mass + b.truncation_mass - a.truncation_mass * b.truncation_mass
    masses, min_index, truncation = _truncate_tails(
        masses, a.min_index + b.min_index, truncation, cfg.tail_bound
    )
    return PrivacyLossDistribution(
        grid_spacing=a.grid_spacing,
        min_index=min_index,
        masses=masses,
        truncation_mass=min(truncation, 1.0),
        direction=a.direction,
    )


def pld_convolve(a: PrivacyLossDistribution, b: PrivacyLossDistribution,
                 cfg: Optional[AccountingConfig] = None) -> PrivacyLossDistribution:
    """Compose two (possibly different) PLDs on the same grid."""
    cfg = cfg or AccountingConfig()
    result = _convolve_single(a, b, cfg)
    if a.reverse is not None or b.reverse is not None:
        result.direction = DIRECTION_WORST_CASE
        result.reverse = _convolve_single(a.reverse or a, b.reverse or b, cfg)
    return result


def pld_compose(pld: PrivacyLossDistribution, steps: int,
                cfg: Optional[AccountingConfig] = None) -> PrivacyLossDistribution:
    """
    T-fold self-composition by repeated squaring.

    Args:
        pld: Single-step distribution
        steps: Number of compositions (>= 1)
        cfg: Discretization settings (tail bound, size cap)

    Returns:
        Composed distribution
    """
    cfg = cfg or AccountingConfig()
    if int(steps) != steps or steps < 1:
        raise PrivacyDomainError(f"steps must be a positive integer, got {steps}")
    if steps == 1:
        return pld

    result = None
    base = pld
    n = int(steps)
    while True:
        if n & 1:
            result = base if result is None else pld_convolve(result, base, cfg)
        n >>= 1
        if n == 0:
            break
        base = pld_convolve(base, base, cfg)
    logger.debug(f"Composed PLD over {steps} steps: {result.masses.size} grid points")
    return result


def _component_delta(pld: PrivacyLossDistribution, epsilon: float) -> float:
    losses = pld.losses
    above = losses > epsilon
    terms = pld.masses[above] * -np.expm1(epsilon - losses[above])
    return float(min(1.0, pld.truncation_mass + terms.sum()))


def delta_for_epsilon(pld: PrivacyLossDistribution, epsilon: float) -> float:
    """Delta of the distribution at `epsilon`, worst case over directions."""
    return max(_component_delta(part, epsilon) for part in pld.components())


def _component_epsilon(pld: PrivacyLossDistribution, delta: float) -> float:
    """Smallest grid epsilon >= 0 with delta(epsilon) <= delta; inf if unreachable."""
    if pld.truncation_mass > delta:
        return math.inf
    if _component_delta(pld, 0.0) <= delta:
        return 0.0

    losses = pld.losses
    masses = pld.masses
    # mass strictly above each grid point, and sum_{j>k} p_j exp(l_k - l_j)
    above = np.concatenate([np.cumsum(masses[::-1])[::-1][1:], [0.0]])
    decay = math.exp(-pld.grid_spacing)
    weighted_rev = signal.lfilter([0.0, decay], [1.0, -decay], masses[::-1])
    weighted = weighted_rev[::-1]
    deltas = pld.truncation_mass + above - weighted

    candidates = np.nonzero((losses >= 0.0) & (deltas <= delta))[0]
    if candidates.size == 0:
        return math.inf
    return max(0.0, float(losses[candidates[0]]))


def epsilon_for_delta(pld: PrivacyLossDistribution, delta: float) -> float:
    """Smallest grid epsilon meeting `delta` in every direction (inf if unreachable)."""
    return max(_component_epsilon(part, delta) for part in pld.components())


def composed_pld(spec: SubsampledGaussianSpec,
                 cfg: Optional[AccountingConfig] = None) -> PrivacyLossDistribution:
    cfg = cfg or AccountingConfig()
    single = pld_of_subsampled_gaussian(spec.with_steps(1), cfg)
    return pld_compose(single, spec.steps, cfg)


def epsilon_of(spec: SubsampledGaussianSpec, delta: float,
               cfg: Optional[AccountingConfig] = None) -> float:
    """
    Epsilon spent by `spec.steps` rounds of the subsampled Gaussian mechanism.

    Args:
        spec: Mechanism (sigma, q, steps)
        delta: Target delta in (0, 1)
        cfg: Discretization settings

    Returns:
        Smallest grid epsilon with delta(epsilon) <= delta (never an underestimate)
    """
    if not 0 < delta < 1:
        raise PrivacyDomainError(f"delta must be in (0, 1), got {delta}")
    eps = epsilon_for_delta(composed_pld(spec, cfg), delta)
    if math.isinf(eps):
        raise CalibrationError(
            f"delta={delta} is unreachable within the loss grid for {spec}"
        )
    return eps


def delta_of(spec: SubsampledGaussianSpec, epsilon: float,
             cfg: Optional[AccountingConfig] = None) -> float:
    """Delta spent at `epsilon` by `spec.steps` rounds of the mechanism."""
    if not epsilon >= 0:
        raise PrivacyDomainError(f"epsilon must be >= 0, got {epsilon}")
    return delta_for_epsilon(composed_pld(spec, cfg), epsilon)


def _sigma_guess(epsilon: float, delta: float, q: float, steps: int) -> float:
    """Central-limit guess: mu ~ q sqrt(T (e^{1/s^2} - 1)) solved for s."""
    if q == 1.0:
        return calibrate_gaussian_sigma(epsilon, delta, count=steps)
    lo, hi = 1e-6, 1.0
    while gdp_epsilon(hi, delta) < epsilon:
        hi *= 2.0
        if hi > 1e6:
            break
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if gdp_epsilon(mid, delta) < epsilon:
            lo = mid
        else:
            hi = mid
    mu = lo
    ratio = (mu / q) ** 2 / steps
    return 1.0 / math.sqrt(math.log1p(ratio))


def calibrate_sigma(epsilon: float, delta: float, q: float, steps: int,
                    cfg: Optional[AccountingConfig] = None,
                    sigma_max: float = 1e6) -> float:
    """
    Smallest noise multiplier on the 0.1 grid meeting (epsilon, delta).

    A candidate is accepted only when its estimate plus eps_error stays within
    epsilon, so the true epsilon of the answer cannot exceed the target.

    Args:
        epsilon: Target epsilon (> 0)
        delta: Target delta in (0, 1)
        q: Poisson sampling rate in (0, 1]
        steps: Number of steps
        cfg: Discretization settings
        sigma_max: Largest noise multiplier tried

    Returns:
        sigma with epsilon_of(sigma) + eps_error <= epsilon and
        epsilon_of(sigma - 0.1) + eps_error > epsilon
    """
    if not epsilon > 0:
        raise PrivacyDomainError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise PrivacyDomainError(f"delta must be in (0, 1), got {delta}")
    SubsampledGaussianSpec(sigma=1.0, q=q, steps=steps)
    cfg = cfg or AccountingConfig()
    max_index = int(math.floor(sigma_max / SIGMA_GRID + 1e-9))
    cache: Dict[int, bool] = {}

    def meets(index: int) -> bool:
        if index not in cache:
            sigma = round(index * SIGMA_GRID, 10)
            try:
                eps = epsilon_for_delta(
                    composed_pld(SubsampledGaussianSpec(sigma, q, steps), cfg), delta
                )
            except PldOverflowError:
                # loss grid too wide: only happens far below the answer
                eps = math.inf
            cache[index] = eps + cfg.eps_error <= epsilon
            logger.debug(f"calibrate: sigma={sigma} -> epsilon={eps:.4f} (target {epsilon})")
        return cache[index]

    guess = _sigma_guess(epsilon, delta, q, steps)
    start = min(max(1, int(math.ceil(guess / SIGMA_GRID))), max_index)

    if meets(start):
        hi = start
        step = 1
        lo = hi - step
        while lo >= 1 and meets(lo):
            hi = lo
            step *= 2
            lo = hi - step
        if lo < 1:
            if meets(1):
                return SIGMA_GRID
            lo = 1
    else:
        lo = start
        step = 1
        hi = lo + step
        while not meets(hi):
            lo = hi
            step *= 2
            hi = min(lo + step, max_index)
            if lo >= max_index:
                raise CalibrationError(
                    f"no sigma <= {sigma_max} reaches epsilon={epsilon} at delta={delta}"
                )

    while hi - lo > 1:
        mid = (lo + hi) // 2
        if meets(mid):
            hi = mid
        else:
            lo = mid

    sigma = round(hi * SIGMA_GRID, 10)
    logger.info(
        f"Calibrated sigma={sigma} for epsilon={epsilon}, delta={delta}, q={q}, steps={steps}"
    )
    return sigma


def rdp_epsilon(spec: SubsampledGaussianSpec, delta: float,
                orders: Optional[Sequence[float]] = None) -> float:
    """Renyi-DP upper bound on epsilon, used as an independent cross-check."""
    if orders is None:
        from config import Config
        orders = Config.RDP_ORDERS
    return rdp.rdp_epsilon(spec.q, spec.sigma, spec.steps, delta, orders)
