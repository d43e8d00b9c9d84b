"""JSON experiment configuration with strict schema checking."""
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Union

from config.config import Config
from models.data import AugmentConfig, ContrastiveConfig, GeneratorSpec, PreprocConfig
from models.errors import ConfigError
from models.network import FrontendSpec, ModelSpec
from models.privacy import PrivacyBudget
from models.training import MODE_PRIVATE, TRAIN_MODES

logger = logging.getLogger(__name__)


@dataclass
class GeneratorSection:
    kind: str = 'dead_leaves'
    image_size: int = 16
    params: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class EncoderSection:
    hidden_dims: List[int] = field(default_factory=lambda: [64, 32])
    output_dim: int = 16
    activation: str = 'relu'
    frontend: bool = True
    patch_size: int = 4
    num_filters: int = 16
    stride: int = 2
    frontend_seed: int = 0


@dataclass
class PretrainSection:
    batch_size: int = 64
    steps: int = 300
    learning_rate: float = 0.5
    align_weight: float = 1.0
    uniform_weight: float = 1.0
    t: float = 2.0
    momentum: float = 0.9
    pool_size: int = 2048
    crop_scale: List[float] = field(default_factory=lambda: [0.4, 1.0])
    flip_p: float = 0.5
    jitter: float = 0.2


@dataclass
class PrivateDatasetSection:
    n: int = 6000
    n_test: int = 1500
    num_classes: int = 3
    image_size: int = 16
    alpha_min: float = 0.5
    alpha_max: float = 3.0
    band_gap: float = 0.2


@dataclass
class PlanSection:
    epsilon: float = 1.0
    delta: float = 1e-5
    q: float = 0.05
    T_total: int = 200
    N1: Optional[int] = None
    N1_list: List[int] = field(default_factory=list)
    epsilons: List[float] = field(default_factory=list)
    mode: str = MODE_PRIVATE


@dataclass
class OptimizerSection:
    clip_norm: float = 1.0
    lr_phase2: float = 2.0
    lr_phase3: float = 0.5
    momentum_phase2: float = 0.9
    momentum_phase3: float = 0.0
    augmult: int = 0
    ema_decay: Optional[float] = 0.999
    head_bias: bool = True
    head_zero_init: bool = False
    reinit_head_phase3: bool = False


@dataclass
class PreprocSection:
    norm_C: float = 50.0
    sigma1: float = 0.0
    block_concat: bool = False
    pool_stride: int = 1
    renormalize_after_center: bool = False
    lp_steps: int = 100
    lp_sigma: Optional[float] = None
    lp_learning_rate: float = 0.05
    lp_momentum: float = 0.9


@dataclass
class SeedsSection:
    base: int = 0
    count: int = 1

    def values(self) -> List[int]:
        return [self.base + i for i in range(self.count)]


_SECTIONS = {
    'generator': GeneratorSection,
    'encoder': EncoderSection,
    'pretrain': PretrainSection,
    'private_dataset': PrivateDatasetSection,
    'plan': PlanSection,
    'optimizer': OptimizerSection,
    'preproc': PreprocSection,
    'seeds': SeedsSection,
}


def _parse_section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"section '{name}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {unknown}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid section '{name}': {e}") from e


@dataclass
class ExperimentConfig:
    """Everything needed to replay an experiment."""

    generator: GeneratorSection = field(default_factory=GeneratorSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    private_dataset: PrivateDatasetSection = field(default_factory=PrivateDatasetSection)
    plan: PlanSection = field(default_factory=PlanSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    preproc: PreprocSection = field(default_factory=PreprocSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    output_dir: str = Config.OUTPUT_DIR

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Check cross-field constraints; build every derived object once."""
        p = self.plan
        if p.N1 is not None and not 0 <= p.N1 <= p.T_total:
            raise ConfigError(f"plan.N1 must lie in [0, T_total], got {p.N1}")
        if any(not 0 <= n1 <= p.T_total for n1 in p.N1_list):
            raise ConfigError("every plan.N1_list entry must lie in [0, T_total]")
        if not 0 < p.q <= 1:
            raise ConfigError(f"plan.q must be in (0, 1], got {p.q}")
        if p.T_total < 1:
            raise ConfigError("plan.T_total must be >= 1")
        if p.mode not in TRAIN_MODES:
            raise ConfigError(f"plan.mode must be one of {list(TRAIN_MODES)}, got {p.mode!r}")
        if self.seeds.count < 1:
            raise ConfigError("seeds.count must be >= 1")
        if self.private_dataset.image_size != self.generator.image_size:
            raise ConfigError("private_dataset.image_size must match generator.image_size")
        if self.private_dataset.n < 1 or self.private_dataset.n_test < 0:
            raise ConfigError("private_dataset sizes must be positive")
        try:
            self.budget()
            self.generator_spec()
            self.encoder_spec()
            self.contrastive_config()
            self.preproc_config()
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(epsilon=self.plan.epsilon, delta=self.plan.delta)

    def generator_spec(self) -> GeneratorSpec:
        g = self.generator
        return GeneratorSpec(kind=g.kind, image_size=g.image_size, params=dict(g.params), seed=g.seed)

    def private_generator_spec(self) -> GeneratorSpec:
        d = self.private_dataset
        return GeneratorSpec(
            kind='spectral_noise',
            image_size=d.image_size,
            params={'alpha_min': d.alpha_min, 'alpha_max': d.alpha_max},
        )

    def encoder_spec(self) -> ModelSpec:
        e = self.encoder
        size = self.generator.image_size
        frontend = None
        if e.frontend:
            frontend = FrontendSpec(
                patch_size=e.patch_size,
                num_filters=e.num_filters,
                seed=e.frontend_seed,
                image_size=size,
                channels=3,
                stride=e.stride,
            )
        return ModelSpec(
            kind='encoder',
            input_dim=size * size * 3,
            output_dim=e.output_dim,
            hidden_dims=tuple(e.hidden_dims),
            activation=e.activation,
            frontend=frontend,
        )

    def contrastive_config(self) -> ContrastiveConfig:
        p = self.pretrain
        return ContrastiveConfig(
            batch_size=p.batch_size,
            steps=p.steps,
            learning_rate=p.learning_rate,
            align_weight=p.align_weight,
            uniform_weight=p.uniform_weight,
            t=p.t,
            momentum=p.momentum,
        )

    def augment_config(self) -> AugmentConfig:
        p = self.pretrain
        return AugmentConfig(crop_scale=tuple(p.crop_scale), flip_p=p.flip_p, jitter=p.jitter)

    def preproc_config(self) -> PreprocConfig:
        p = self.preproc
        return PreprocConfig(
            norm_C=p.norm_C,
            sigma1=p.sigma1,
            block_concat=p.block_concat,
            pool_stride=p.pool_stride,
            renormalize_after_center=p.renormalize_after_center,
        )

    def to_dict(self) -> dict:
        data = {name: asdict(getattr(self, name)) for name in _SECTIONS}
        data['output_dir'] = self.output_dir
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ExperimentConfig':
        """
        Parse a config document; unknown keys anywhere are rejected.

        Args:
            data: Decoded JSON object

        Returns:
            ExperimentConfig
        """
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = sorted(set(data) - set(_SECTIONS) - {'output_dir'})
        if unknown:
            raise ConfigError(f"unknown top-level keys: {unknown}")
        sections = {
            name: _parse_section(name, section_cls, data.get(name, {}))
            for name, section_cls in _SECTIONS.items()
        }
        output_dir = data.get('output_dir', Config.OUTPUT_DIR)
        if not isinstance(output_dir, str) or not output_dir:
            raise ConfigError("output_dir must be a non-empty string")
        return cls(output_dir=output_dir, **sections)

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'ExperimentConfig':
        """Read a JSON config file; DPRP_SEED in the environment overrides seeds.base."""
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        config = cls.from_dict(data)
        if Config.DPRP_SEED is not None:
            logger.info(f"DPRP_SEED={Config.DPRP_SEED} overrides seeds.base={config.seeds.base}")
            config.seeds.base = Config.DPRP_SEED
        return config
