"""Network data models: flat parameter storage and model descriptions."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.errors import NumericalFailureError, ShapeError

KIND_LINEAR_HEAD = 'linear_head'
KIND_MLP = 'mlp'
KIND_ENCODER = 'encoder'
MODEL_KINDS = (KIND_LINEAR_HEAD, KIND_MLP, KIND_ENCODER)
ACTIVATIONS = ('relu', 'tanh')

Segment = Tuple[str, Tuple[int, ...]]


@dataclass(frozen=True)
class FrontendSpec:
    """Fixed (untrained, seeded) random patch-convolution featurizer."""

    patch_size: int = 4
    num_filters: int = 16
    seed: int = 0
    image_size: int = 16
    channels: int = 3
    stride: int = 2

    def __post_init__(self):
        if self.patch_size < 1 or self.num_filters < 1 or self.stride < 1:
            raise ShapeError("frontend patch_size, num_filters and stride must be >= 1")
        if self.patch_size > self.image_size:
            raise ShapeError(
                f"patch_size {self.patch_size} exceeds image_size {self.image_size}"
            )
        if self.positions < 2:
            raise ShapeError("frontend needs at least 2 patch positions per side for 2x2 pooling")

    @property
    def input_dim(self) -> int:
        return self.image_size * self.image_size * self.channels

    @property
    def positions(self) -> int:
        """Patch positions per side."""
        return (self.image_size - self.patch_size) // self.stride + 1

    @property
    def output_dim(self) -> int:
        # 2x2 average pooling over the response map
        return 4 * self.num_filters

    def to_dict(self) -> dict:
        return {
            'patch_size': self.patch_size,
            'num_filters': self.num_filters,
            'seed': self.seed,
            'image_size': self.image_size,
            'channels': self.channels,
            'stride': self.stride,
        }


@dataclass(frozen=True)
class ModelSpec:
    """
    Description of a small differentiable model.

    linear_head: one dense layer producing logits.
    mlp: optional frontend, dense hidden layers, dense output layer (logits).
    encoder: like mlp, but the output is an L2-normalized embedding.
    """

    kind: str
    input_dim: int
    output_dim: int
    hidden_dims: Tuple[int, ...] = ()
    activation: str = 'relu'
    frontend: Optional[FrontendSpec] = None
    use_bias: bool = True
    zero_init_head: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'hidden_dims', tuple(int(h) for h in self.hidden_dims))
        if self.kind not in MODEL_KINDS:
            raise ShapeError(f"unknown model kind: {self.kind}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation: {self.activation}")
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ShapeError("model dimensions must be positive")
        if self.kind == KIND_LINEAR_HEAD and (self.hidden_dims or self.frontend):
            raise ShapeError("linear_head takes no hidden layers and no frontend")
        if self.frontend is not None and self.frontend.input_dim != self.input_dim:
            raise ShapeError(
                f"frontend expects {self.frontend.input_dim} inputs, model has {self.input_dim}"
            )

    @property
    def layer_dims(self) -> List[int]:
        """Widths from the dense input through the output."""
        first = self.frontend.output_dim if self.frontend else self.input_dim
        return [first, *self.hidden_dims, self.output_dim]

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims) + 1

    def layout(self) -> List[Segment]:
        dims = self.layer_dims
        segments: List[Segment] = []
        for i in range(self.num_layers):
            segments.append((f'layer{i}.weight', (dims[i], dims[i + 1])))
            if self.use_bias:
                segments.append((f'layer{i}.bias', (dims[i + 1],)))
        return segments

    @property
    def num_params(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.layout()))

    def to_dict(self) -> dict:
        return {
            'kind': self.kind,
            'input_dim': self.input_dim,
            'output_dim': self.output_dim,
            'hidden_dims': list(self.hidden_dims),
            'activation': self.activation,
            'frontend': self.frontend.to_dict() if self.frontend else None,
            'use_bias': self.use_bias,
            'zero_init_head': self.zero_init_head,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'ModelSpec':
        frontend = data.get('frontend')
        return cls(
            kind=data['kind'],
            input_dim=int(data['input_dim']),
            output_dim=int(data['output_dim']),
            hidden_dims=tuple(data.get('hidden_dims', ())),
            activation=data.get('activation', 'relu'),
            frontend=FrontendSpec(**frontend) if frontend else None,
            use_bias=bool(data.get('use_bias', True)),
            zero_init_head=bool(data.get('zero_init_head', False)),
        )


@dataclass
class ParameterVector:
    """Flat float64 parameters with an ordered (name, shape) layout."""

    values: np.ndarray
    layout: List[Segment] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        self.layout = [(name, tuple(int(d) for d in shape)) for name, shape in self.layout]
        expected = int(sum(np.prod(shape) for _, shape in self.layout))
        if self.layout and expected != self.values.size:
            raise ShapeError(
                f"layout describes {expected} values, vector holds {self.values.size}"
            )

    @property
    def size(self) -> int:
        return self.values.size

    def offsets(self) -> Dict[str, Tuple[int, int]]:
        out = {}
        start = 0
        for name, shape in self.layout:
            stop = start + int(np.prod(shape))
            out[name] = (start, stop)
            start = stop
        return out

    def segment(self, name: str) -> np.ndarray:
        """Reshaped view of one segment."""
        for seg_name, shape in self.layout:
            if seg_name == name:
                start, stop = self.offsets()[name]
                return self.values[start:stop].reshape(shape)
        raise KeyError(name)

    def segments(self) -> Dict[str, np.ndarray]:
        offsets = self.offsets()
        return {
            name: self.values[offsets[name][0]:offsets[name][1]].reshape(shape)
            for name, shape in self.layout
        }

    def with_values(self, values: np.ndarray) -> 'ParameterVector':
        return ParameterVector(values=np.array(values, dtype=np.float64), layout=list(self.layout))

    def copy(self) -> 'ParameterVector':
        return self.with_values(self.values.copy())

    def zeros_like(self) -> 'ParameterVector':
        return self.with_values(np.zeros_like(self.values))

    def check_finite(self, step: int = -1):
        if not np.all(np.isfinite(self.values)):
            raise NumericalFailureError("non-finite parameter values", step=step)

    @classmethod
    def from_segments(cls, segments: Sequence[Tuple[str, np.ndarray]]) -> 'ParameterVector':
        layout = [(name, tuple(np.shape(arr))) for name, arr in segments]
        if not segments:
            return cls(values=np.zeros(0), layout=[])
        values = np.concatenate([np.asarray(arr, dtype=np.float64).reshape(-1) for _, arr in segments])
        return cls(values=values, layout=layout)


@dataclass
class Example:
    """One labelled input row."""

    input: np.ndarray
    label: int

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=np.float64).reshape(-1)
        self.label = int(self.label)


def stack_examples(batch: Sequence[Example]) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs as an (n, d) matrix and labels as an (n,) vector."""
    if not batch:
        raise ShapeError("batch must not be empty")
    inputs = np.stack([ex.input for ex in batch])
    labels = np.array([ex.label for ex in batch], dtype=np.int64)
    return inputs, labels
