from .errors import (
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
from .privacy import (
    PrivacyBudget,
    GaussianMechanismSpec,
    GdpParameter,
    SubsampledGaussianSpec,
    AccountingConfig,
    PrivacyLossDistribution,
)
from .network import FrontendSpec, ModelSpec, ParameterVector, Example
from .training import (
    DpSgdConfig,
    RngStreams,
    TrainState,
    MetricRow,
    PhasePlan,
    LedgerEntry,
    RunReport,
    TrainResult,
    LinearProbePlan,
    SweepRow,
)
from .data import (
    GeneratorSpec,
    ImageTensor,
    AugmentConfig,
    ContrastiveConfig,
    PreprocConfig,
    FeatureMatrix,
    LabeledImages,
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
    'PrivacyBudget',
    'GaussianMechanismSpec',
    'GdpParameter',
    'SubsampledGaussianSpec',
    'AccountingConfig',
    'PrivacyLossDistribution',
    'FrontendSpec',
    'ModelSpec',
    'ParameterVector',
    'Example',
    'DpSgdConfig',
    'RngStreams',
    'TrainState',
    'MetricRow',
    'PhasePlan',
    'LedgerEntry',
    'RunReport',
    'TrainResult',
    'LinearProbePlan',
    'SweepRow',
    'GeneratorSpec',
    'ImageTensor',
    'AugmentConfig',
    'ContrastiveConfig',
    'PreprocConfig',
    'FeatureMatrix',
    'LabeledImages',
]
