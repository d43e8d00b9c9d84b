from models.errors import (
    NoisePriorError,
    PrivacyDomainError,
    CalibrationError,
    PldOverflowError,
    BudgetExceededError,
    NumericalFailureError,
    ShapeError,
    ConfigError,
    FormatError,
)
from .helpers import (
    setup_logging,
    canonical_json,
    content_hash,
)
from .privacy_core import gdp_delta, gdp_epsilon, compose_gaussians, calibrate_gaussian_sigma
from .accountant import (
    pld_of_subsampled_gaussian,
    pld_compose,
    pld_convolve,
    epsilon_of,
    delta_of,
    calibrate_sigma,
    rdp_epsilon,
)
from .ledger import PrivacyLedger
from .persistence import ArtifactStore
from .pipeline import (
    recommend_n1,
    allocate_budget,
    run_three_phase,
    run_lp_only,
    run_cold_baseline,
    run_two_stage_cold,
    sweep_allocation,
    epsilon1_fraction_table,
)

__all__ = [
    'NoisePriorError',
    'PrivacyDomainError',
    'CalibrationError',
    'PldOverflowError',
    'BudgetExceededError',
    'NumericalFailureError',
    'ShapeError',
    'ConfigError',
    'FormatError',
    'setup_logging',
    'canonical_json',
    'content_hash',
    'gdp_delta',
    'gdp_epsilon',
    'compose_gaussians',
    'calibrate_gaussian_sigma',
    'pld_of_subsampled_gaussian',
    'pld_compose',
    'pld_convolve',
    'epsilon_of',
    'delta_of',
    'calibrate_sigma',
    'rdp_epsilon',
    'PrivacyLedger',
    'ArtifactStore',
    'recommend_n1',
    'allocate_budget',
    'run_three_phase',
    'run_lp_only',
    'run_cold_baseline',
    'run_two_stage_cold',
    'sweep_allocation',
    'epsilon1_fraction_table',
]
