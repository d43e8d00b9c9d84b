"""Forward passes, losses and exact per-sample gradients for the small models.

Everything is float64 and vectorized over the batch. The random patch
frontend is constant, so gradients stop at its output.
"""
import logging
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from models.errors import NumericalFailureError, ShapeError
from models.network import (
    KIND_ENCODER,
    KIND_LINEAR_HEAD,
    KIND_MLP,
    Example,
    FrontendSpec,
    ModelSpec,
    ParameterVector,
    stack_examples,
)

logger = logging.getLogger(__name__)


@lru_cache(maxsize=32)
def frontend_filters(frontend: FrontendSpec) -> np.ndarray:
    """Seeded random filters of shape (F, p, p, C)."""
    rng = np.random.default_rng(frontend.seed)
    p, c = frontend.patch_size, frontend.channels
    filters = rng.standard_normal((frontend.num_filters, p, p, c)) / np.sqrt(p * p * c)
    filters.setflags(write=False)
    return filters


def frontend_features(frontend: FrontendSpec, inputs: np.ndarray) -> np.ndarray:
    """
    Apply the fixed patch convolution, relu and 2x2 average pooling.

    Args:
        frontend: Frontend description
        inputs: (n, H*W*C) flattened images

    Returns:
        (n, 4 * num_filters) pooled responses
    """
    n = inputs.shape[0]
    size, c = frontend.image_size, frontend.channels
    images = inputs.reshape(n, size, size, c)
    windows = sliding_window_view(images, (frontend.patch_size, frontend.patch_size), axis=(1, 2))
    windows = windows[:, ::frontend.stride, ::frontend.stride]
    response = np.einsum('nhwcij,fijc->nhwf', windows, frontend_filters(frontend), optimize=True)
    response = np.maximum(response, 0.0)

    pooled = []
    for rows in np.array_split(response, 2, axis=1):
        for block in np.array_split(rows, 2, axis=2):
            pooled.append(block.mean(axis=(1, 2)))
    return np.stack(pooled, axis=1).reshape(n, -1)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParameterVector:
    """Uniform(-s, s) weights with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
    segments = []
    last = spec.num_layers - 1
    for name, shape in spec.layout():
        if name.endswith('.bias'):
            segments.append((name, np.zeros(shape)))
            continue
        if spec.zero_init_head and name == f'layer{last}.weight':
            segments.append((name, np.zeros(shape)))
            continue
        fan_in, fan_out = shape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        segments.append((name, rng.uniform(-bound, bound, size=shape)))
    return ParameterVector.from_segments(segments)


def _activate(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == 'relu':
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(spec: ModelSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == 'relu':
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def _check_params(spec: ModelSpec, params: ParameterVector):
    if params.layout != spec.layout():
        raise ShapeError(f"parameter layout does not match {spec.kind} model")


def forward_cache(spec: ModelSpec, params: ParameterVector, inputs: np.ndarray) -> Dict:
    """Forward pass keeping everything backward() needs."""
    _check_params(spec, params)
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[None, :]
    if inputs.shape[1] != spec.input_dim:
        raise ShapeError(f"expected input dim {spec.input_dim}, got {inputs.shape[1]}")

    seg = params.segments()
    a = frontend_features(spec.frontend, inputs) if spec.frontend else inputs
    layer_inputs, pre = [], []
    z = a
    for i in range(spec.num_layers):
        layer_inputs.append(a)
        z = a @ seg[f'layer{i}.weight']
        if spec.use_bias:
            z = z + seg[f'layer{i}.bias']
        pre.append(z)
        if i < spec.num_layers - 1:
            a = _activate(spec, z)

    cache = {'layer_inputs': layer_inputs, 'pre': pre, 'output': z}
    if spec.kind == KIND_ENCODER:
        norms = np.linalg.norm(z, axis=1)
        if np.any(norms == 0.0):
            raise NumericalFailureError("encoder produced a zero embedding")
        cache['norms'] = norms
        cache['output'] = z / norms[:, None]
    return cache


def forward_batch(spec: ModelSpec, params: ParameterVector, inputs: np.ndarray) -> np.ndarray:
    return forward_cache(spec, params, inputs)['output']


def forward(spec: ModelSpec, params: ParameterVector, x: np.ndarray) -> np.ndarray:
    """Logits (or unit embedding for encoders) for a single input vector."""
    return forward_batch(spec, params, np.asarray(x, dtype=np.float64)[None, :])[0]


def hidden_activations(spec: ModelSpec, params: ParameterVector,
                       inputs: np.ndarray) -> List[np.ndarray]:
    """Post-activation outputs of every hidden layer."""
    cache = forward_cache(spec, params, inputs)
    return cache['layer_inputs'][1:]


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row softmax negative log-likelihood."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(labels)
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ShapeError(f"labels must lie in [0, {logits.shape[1]})")
    picked = logits[np.arange(logits.shape[0]), labels]
    return special.logsumexp(logits, axis=1) - picked


def loss(logits: np.ndarray, label: int) -> float:
    """Cross-entropy of one logit vector."""
    return float(cross_entropy(np.asarray(logits, dtype=np.float64)[None, :], np.array([label]))[0])


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """softmax - onehot, row-wise."""
    probs = special.softmax(logits, axis=1)
    probs[np.arange(logits.shape[0]), labels] -= 1.0
    return probs


def backward(spec: ModelSpec, params: ParameterVector, cache: Dict,
             upstream: np.ndarray, per_sample: bool = True) -> np.ndarray:
    """
    Backpropagate an upstream gradient on the model output.

    Args:
        spec: Model description
        params: Parameters used in the forward pass
        cache: Result of forward_cache
        upstream: (n, output_dim) gradient w.r.t. the model output
        per_sample: Return one gradient row per sample instead of their sum

    Returns:
        (n, P) per-sample gradients or a (P,) summed gradient
    """
    seg = params.segments()
    g = np.asarray(upstream, dtype=np.float64)
    if spec.kind == KIND_ENCODER:
        y = cache['output']
        g = (g - y * np.sum(y * g, axis=1, keepdims=True)) / cache['norms'][:, None]

    n = g.shape[0]
    grads: Dict[str, np.ndarray] = {}
    for i in reversed(range(spec.num_layers)):
        a_in = cache['layer_inputs'][i]
        if per_sample:
            grads[f'layer{i}.weight'] = (a_in[:, :, None] * g[:, None, :]).reshape(n, -1)
            if spec.use_bias:
                grads[f'layer{i}.bias'] = g
        else:
            grads[f'layer{i}.weight'] = (a_in.T @ g).reshape(-1)
            if spec.use_bias:
                grads[f'layer{i}.bias'] = g.sum(axis=0)
        if i > 0:
            g = (g @ seg[f'layer{i}.weight'].T) * _activation_grad(spec, cache['pre'][i - 1])

    ordered = [grads[name] for name, _ in spec.layout()]
    if per_sample:
        return np.concatenate(ordered, axis=1)
    return np.concatenate(ordered)


def per_sample_grads(spec: ModelSpec, params: ParameterVector, inputs: np.ndarray,
                     labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-sample cross-entropy losses and gradients.

    Returns:
        (losses of shape (n,), gradients of shape (n, P))
    """
    cache = forward_cache(spec, params, inputs)
    logits = cache['output']
    labels = np.asarray(labels, dtype=np.int64)
    losses = cross_entropy(logits, labels)
    grads = backward(spec, params, cache, cross_entropy_grad(logits, labels))
    return losses, grads


def per_sample_grad(spec: ModelSpec, params: ParameterVector,
                    batch: Sequence[Example]) -> List[ParameterVector]:
    """One gradient ParameterVector per example, in batch order."""
    inputs, labels = stack_examples(batch)
    _, grads = per_sample_grads(spec, params, inputs, labels)
    return [params.with_values(row) for row in grads]


def example_loss(spec: ModelSpec, params: ParameterVector, example: Example) -> float:
    return loss(forward(spec, params, example.input), example.label)


def finite_diff_grad(spec: ModelSpec, params: ParameterVector, example: Example,
                     h: float = 1e-5) -> ParameterVector:
    """Central-difference gradient of the example loss (test oracle)."""
    if not h > 0:
        raise ValueError(f"finite-difference step must be > 0, got {h}")
    base = params.values
    grad = np.empty_like(base)
    for k in range(base.size):
        plus = base.copy()
        plus[k] += h
        minus = base.copy()
        minus[k] -= h
        grad[k] = (
            example_loss(spec, params.with_values(plus), example)
            - example_loss(spec, params.with_values(minus), example)
        ) / (2.0 * h)
    return params.with_values(grad)


def predict(spec: ModelSpec, params: ParameterVector, inputs: np.ndarray) -> np.ndarray:
    return np.argmax(forward_batch(spec, params, inputs), axis=1)


def accuracy(spec: ModelSpec, params: ParameterVector, inputs: np.ndarray,
             labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float('nan')
    return float(np.mean(predict(spec, params, inputs) == np.asarray(labels)))


def _require_trunk(encoder: ModelSpec):
    if encoder.kind != KIND_ENCODER or not encoder.hidden_dims:
        raise ShapeError("trunk requires an encoder with at least one hidden layer")


def classifier_spec(encoder: ModelSpec, num_classes: int, zero_init_head: bool = False) -> ModelSpec:
    """Encoder trunk followed by a linear classification head."""
    _require_trunk(encoder)
    return ModelSpec(
        kind=KIND_MLP,
        input_dim=encoder.input_dim,
        output_dim=num_classes,
        hidden_dims=encoder.hidden_dims,
        activation=encoder.activation,
        frontend=encoder.frontend,
        use_bias=encoder.use_bias,
        zero_init_head=zero_init_head,
    )


def head_spec(encoder: ModelSpec, num_classes: int, use_bias: bool = True,
              zero_init: bool = False) -> ModelSpec:
    """Linear head on the encoder's last hidden layer."""
    _require_trunk(encoder)
    return ModelSpec(
        kind=KIND_LINEAR_HEAD,
        input_dim=encoder.hidden_dims[-1],
        output_dim=num_classes,
        use_bias=use_bias,
        zero_init_head=zero_init,
    )


def trunk_features(encoder: ModelSpec, params: ParameterVector, inputs: np.ndarray) -> np.ndarray:
    """Last hidden layer activations (the features a head is trained on)."""
    return hidden_activations(encoder, params, inputs)[-1]


def assemble_classifier(encoder: ModelSpec, encoder_params: ParameterVector,
                        head: ModelSpec, head_params: ParameterVector,
                        num_classes: int) -> Tuple[ModelSpec, ParameterVector]:
    """
    Build classifier parameters from trained encoder trunk weights and a head.

    A head without bias gets a zero bias when the classifier itself uses biases.
    """
    spec = classifier_spec(encoder, num_classes)
    head_index = spec.num_layers - 1
    enc = encoder_params.segments()
    hd = head_params.segments()
    segments = []
    for name, shape in spec.layout():
        if name.startswith(f'layer{head_index}.'):
            local = name.replace(f'layer{head_index}.', 'layer0.')
            segments.append((name, hd[local] if local in hd else np.zeros(shape)))
        else:
            segments.append((name, enc[name]))
    return spec, ParameterVector.from_segments(segments)
