from .config import Config
from .experiment import ExperimentConfig

__all__ = ['Config', 'ExperimentConfig']
