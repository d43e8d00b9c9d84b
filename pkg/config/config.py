"""Configuration management for the noise-prior DP toolkit."""
import os
from typing import Optional
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


def _optional_int(name: str) -> Optional[int]:
    value = os.getenv(name, '').strip()
    return int(value) if value.lstrip('-').isdigit() else None


class Config:
    """Configuration class for toolkit settings."""

    # Logging Configuration
    LOG_LEVEL: str = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE: str = os.getenv('LOG_FILE', '')
    LOG_FORMAT: str = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    # Experiments
    DPRP_SEED: Optional[int] = _optional_int('DPRP_SEED')
    OUTPUT_DIR: str = os.getenv('OUTPUT_DIR', 'runs')

    # Privacy loss distribution accounting
    PLD_GRID_SPACING: float = float(os.getenv('PLD_GRID_SPACING', '1e-4'))
    PLD_EPS_ERROR: float = float(os.getenv('PLD_EPS_ERROR', '0.01'))
    PLD_TAIL_BOUND: float = float(os.getenv('PLD_TAIL_BOUND', '1e-12'))
    PLD_MAX_GRID_POINTS: int = int(os.getenv('PLD_MAX_GRID_POINTS', str(2 ** 24)))

    # Noise calibration
    SIGMA_GRID: float = 0.1
    SIGMA_MAX: float = float(os.getenv('SIGMA_MAX', '1e6'))

    # RDP cross-check orders
    RDP_ORDERS = (
        [1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 3.0, 3.5, 4.0, 4.5]
        + [float(a) for a in range(5, 64)]
        + [128.0, 256.0, 512.0]
    )

    @classmethod
    def validate(cls) -> bool:
        """Validate configuration ranges."""
        if cls.PLD_GRID_SPACING <= 0:
            raise ValueError("PLD_GRID_SPACING must be positive.")
        if cls.PLD_EPS_ERROR <= 0:
            raise ValueError("PLD_EPS_ERROR must be positive.")
        if not 0 < cls.PLD_TAIL_BOUND < 1:
            raise ValueError("PLD_TAIL_BOUND must be in (0, 1).")
        if cls.PLD_MAX_GRID_POINTS < 1024:
            raise ValueError("PLD_MAX_GRID_POINTS is too small.")
        if cls.SIGMA_MAX <= cls.SIGMA_GRID:
            raise ValueError("SIGMA_MAX must exceed the calibration grid step.")
        return True
