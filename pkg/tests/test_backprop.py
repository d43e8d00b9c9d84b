import numpy as np
import pytest
from scipy import special

from models.errors import ShapeError
from models.network import Example, FrontendSpec, ModelSpec
from utils import backprop


def _models():
    frontend = FrontendSpec(patch_size=2, num_filters=2, seed=3, image_size=4, channels=3, stride=1)
    return {
        'linear_head': ModelSpec(kind='linear_head', input_dim=6, output_dim=3),
        'mlp': ModelSpec(kind='mlp', input_dim=5, output_dim=3, hidden_dims=(4, 3), activation='tanh'),
        'encoder': ModelSpec(kind='encoder', input_dim=5, output_dim=4, hidden_dims=(4,), activation='tanh'),
        'encoder_frontend': ModelSpec(kind='encoder', input_dim=48, output_dim=3, hidden_dims=(4,),
                                      activation='tanh', frontend=frontend),
        'no_bias': ModelSpec(kind='mlp', input_dim=5, output_dim=2, hidden_dims=(3,), activation='tanh',
                             use_bias=False),
    }


def _random_params(spec, rng):
    params = backprop.init_params(spec, rng)
    # nonzero biases so their gradients are exercised
    return params.with_values(params.values + 0.1 * rng.standard_normal(params.size))


def _encoder_loss(spec, params, example, direction):
    return float(direction @ backprop.forward(spec, params, example.input))


@pytest.mark.parametrize('name', ['linear_head', 'mlp', 'no_bias'])
def test_per_sample_grad_matches_finite_differences(name):
    spec = _models()[name]
    rng = np.random.default_rng(0)
    for _ in range(100):
        params = _random_params(spec, rng)
        example = Example(rng.standard_normal(spec.input_dim), int(rng.integers(spec.output_dim)))
        analytic = backprop.per_sample_grad(spec, params, [example])[0].values
        numeric = backprop.finite_diff_grad(spec, params, example, h=1e-5).values
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize('name', ['encoder', 'encoder_frontend'])
def test_encoder_backward_matches_finite_differences(name):
    spec = _models()[name]
    rng = np.random.default_rng(1)
    h = 1e-5
    for _ in range(100):
        params = _random_params(spec, rng)
        example = Example(rng.random(spec.input_dim), 0)
        direction = rng.standard_normal(spec.output_dim)
        cache = backprop.forward_cache(spec, params, example.input[None, :])
        analytic = backprop.backward(spec, params, cache, direction[None, :])[0]
        numeric = np.empty(params.size)
        for k in range(params.size):
            plus, minus = params.values.copy(), params.values.copy()
            plus[k] += h
            minus[k] -= h
            numeric[k] = (_encoder_loss(spec, params.with_values(plus), example, direction)
                          - _encoder_loss(spec, params.with_values(minus), example, direction)) / (2 * h)
        np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


def test_linear_head_logit_gradient_is_softmax_minus_onehot():
    logits = np.array([[1.0, -2.0, 0.5]])
    grad = backprop.cross_entropy_grad(logits.copy(), np.array([2]))
    expected = special.softmax(logits, axis=1)
    expected[0, 2] -= 1.0
    np.testing.assert_allclose(grad, expected, rtol=1e-15)


def test_batched_gradients_equal_single_example_gradients(rng):
    spec = _models()['mlp']
    params = _random_params(spec, rng)
    inputs = rng.standard_normal((6, spec.input_dim))
    labels = rng.integers(0, spec.output_dim, size=6)
    _, rows = backprop.per_sample_grads(spec, params, inputs, labels)
    for i in range(6):
        single = backprop.per_sample_grad(spec, params, [Example(inputs[i], labels[i])])[0]
        np.testing.assert_allclose(rows[i], single.values, rtol=1e-12, atol=1e-15)


def test_summed_backward_equals_sum_of_rows(rng):
    spec = _models()['encoder']
    params = _random_params(spec, rng)
    inputs = rng.random((5, spec.input_dim))
    upstream = rng.standard_normal((5, spec.output_dim))
    cache = backprop.forward_cache(spec, params, inputs)
    rows = backprop.backward(spec, params, cache, upstream, per_sample=True)
    total = backprop.backward(spec, params, cache, upstream, per_sample=False)
    np.testing.assert_allclose(total, rows.sum(axis=0), rtol=1e-12, atol=1e-14)


def test_encoder_output_is_unit_norm(rng):
    spec = _models()['encoder_frontend']
    params = backprop.init_params(spec, rng)
    out = backprop.forward_batch(spec, params, rng.random((7, spec.input_dim)))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, rtol=1e-12)


def test_init_params_layout_and_zero_biases(rng):
    spec = _models()['mlp']
    params = backprop.init_params(spec, rng)
    assert params.layout == spec.layout()
    assert params.size == spec.num_params
    for name, value in params.segments().items():
        if name.endswith('.bias'):
            assert np.all(value == 0)


@pytest.mark.parametrize('activation', ['relu', 'tanh'])
def test_weights_are_uniform_xavier_for_every_activation(rng, activation):
    spec = ModelSpec(kind='mlp', input_dim=40, output_dim=10, hidden_dims=(30,), activation=activation)
    for name, value in backprop.init_params(spec, rng).segments().items():
        if name.endswith('.weight'):
            fan_in, fan_out = value.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.abs(value).max() <= bound
            assert np.abs(value).max() > 0.9 * bound


def test_zero_init_head(rng):
    spec = ModelSpec(kind='linear_head', input_dim=4, output_dim=3, zero_init_head=True)
    assert np.all(backprop.init_params(spec, rng).values == 0)


def test_shape_mismatch_is_rejected(rng):
    spec = _models()['mlp']
    params = backprop.init_params(spec, rng)
    with pytest.raises(ShapeError):
        backprop.forward_batch(spec, params, np.zeros((2, spec.input_dim + 1)))
    other = backprop.init_params(_models()['linear_head'], rng)
    with pytest.raises(ShapeError):
        backprop.forward_batch(spec, other, np.zeros((2, spec.input_dim)))


def test_labels_out_of_range(rng):
    with pytest.raises(ShapeError):
        backprop.cross_entropy(np.zeros((1, 3)), np.array([3]))


def test_assemble_classifier_reuses_trunk(toy_encoder, rng):
    enc_params = backprop.init_params(toy_encoder, rng)
    head = backprop.head_spec(toy_encoder, 3, use_bias=False)
    head_params = backprop.init_params(head, rng)
    spec, params = backprop.assemble_classifier(toy_encoder, enc_params, head, head_params, 3)
    seg = params.segments()
    np.testing.assert_array_equal(seg['layer0.weight'], enc_params.segment('layer0.weight'))
    np.testing.assert_array_equal(seg['layer1.weight'], head_params.segment('layer0.weight'))
    # a head without bias gets a zero bias in the classifier
    assert np.all(seg['layer1.bias'] == 0)

    inputs = np.random.default_rng(5).random((4, toy_encoder.input_dim))
    feats = backprop.trunk_features(toy_encoder, enc_params, inputs)
    np.testing.assert_allclose(
        backprop.forward_batch(spec, params, inputs),
        backprop.forward_batch(head, head_params, feats),
        rtol=1e-12,
    )


def test_head_spec_requires_hidden_layers():
    encoder = ModelSpec(kind='encoder', input_dim=4, output_dim=2)
    with pytest.raises(ShapeError):
        backprop.head_spec(encoder, 3)
