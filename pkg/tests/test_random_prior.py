import dataclasses
import math

import numpy as np
import pytest

from models.data import AugmentConfig, ContrastiveConfig, GeneratorSpec, ImageTensor
from models.errors import ConfigError, ShapeError
from models.network import ModelSpec
from utils import backprop, random_prior
from utils.ledger import PrivacyLedger
from utils.random_prior import Augmenter


@pytest.mark.parametrize('kind', ['dead_leaves', 'spectral_noise', 'color_mixture'])
def test_generators_are_deterministic_and_bounded(kind):
    spec = GeneratorSpec(kind=kind, image_size=12, seed=5)
    first = random_prior.generate(spec, 4)
    second = random_prior.generate(spec, 4)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.data, b.data)
        assert a.shape == (12, 12, 3)
        assert a.data.min() >= 0.0 and a.data.max() <= 1.0
    other = random_prior.generate(spec.with_seed(6), 4)
    assert not np.array_equal(first[0].data, other[0].data)


def test_image_index_streams_are_independent_of_count():
    spec = GeneratorSpec(kind='dead_leaves', image_size=8, seed=2)
    few = random_prior.generate_array(spec, 2)
    many = random_prior.generate_array(spec, 5)
    np.testing.assert_array_equal(few, many[:2])


def test_dead_leaves_without_shapes_is_one_color():
    spec = GeneratorSpec(kind='dead_leaves', image_size=8, params={'count_min': 0, 'count_max': 0})
    image = random_prior.generate(spec, 1)[0].data
    assert np.all(image == image[0, 0])


def test_spectral_noise_channels_span_unit_range():
    image = random_prior.generate(GeneratorSpec(kind='spectral_noise', image_size=16), 1)[0].data
    for c in range(3):
        assert image[:, :, c].min() == pytest.approx(0.0)
        assert image[:, :, c].max() == pytest.approx(1.0)


def test_white_spectral_noise_has_flat_spectrum():
    spec = GeneratorSpec(kind='spectral_noise', image_size=32, params={'alpha_min': 0.0, 'alpha_max': 0.0})
    images = random_prior.generate_array(spec, 20).reshape(20, 32, 32, 3)
    power = np.abs(np.fft.fft2(images - images.mean(axis=(1, 2), keepdims=True), axes=(1, 2))) ** 2
    radial = np.hypot(*np.meshgrid(np.fft.fftfreq(32), np.fft.fftfreq(32), indexing='ij'))
    low = power[:, (radial > 0) & (radial < 0.2)].mean()
    high = power[:, radial > 0.3].mean()
    assert high == pytest.approx(low, rel=0.1)


def test_unknown_generator_parameters():
    with pytest.raises(ConfigError):
        GeneratorSpec(kind='dead_leaves', params={'alpha_min': 1.0})
    with pytest.raises(ConfigError):
        GeneratorSpec(kind='plasma')


class TestPrivateDataset:
    def test_balanced_labels(self, private_spec):
        data = random_prior.make_private_dataset(private_spec, n=30, seed=3)
        assert np.bincount(data.labels).tolist() == [10, 10, 10]
        assert data.inputs.shape == (30, private_spec.input_dim)
        assert data.num_classes == 3

    def test_deterministic(self, private_spec):
        a = random_prior.make_private_dataset(private_spec, n=12, seed=3)
        b = random_prior.make_private_dataset(private_spec, n=12, seed=3)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_requires_spectral_noise(self):
        with pytest.raises(ConfigError):
            random_prior.make_private_dataset(GeneratorSpec(kind='dead_leaves'), n=10, seed=0)


class TestAugment:
    def test_identity(self, rng):
        image = ImageTensor(rng.random((8, 8, 3)))
        out = random_prior.augment(image, rng, AugmentConfig.identity())
        np.testing.assert_array_equal(out.data, image.data)

    def test_flip_only(self, rng):
        image = ImageTensor(rng.random((8, 8, 3)))
        out = random_prior.augment(image, rng, AugmentConfig(crop_scale=(1.0, 1.0), flip_p=1.0, jitter=0.0))
        np.testing.assert_array_equal(out.data, image.data[:, ::-1])

    def test_default_augment_keeps_shape_and_range(self, rng):
        image = ImageTensor(rng.random((8, 8, 3)))
        for _ in range(20):
            out = random_prior.augment(image, rng)
            assert out.shape == image.shape
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestContrastiveLoss:
    def test_closed_form_for_antipodal_pairs(self):
        e1 = np.array([1.0, 0.0, 0.0])
        align, uniform = random_prior.alignment_uniformity_loss([(e1, e1), (-e1, -e1)], t=2.0)
        assert align == 0.0
        assert uniform == pytest.approx(math.log((1 + 2 * math.exp(-8)) / 3), rel=1e-12)

    def test_alignment_of_orthogonal_pairs(self):
        e1, e2 = np.eye(2)
        align, _ = random_prior.alignment_uniformity_loss([(e1, e2), (e2, e1)])
        assert align == pytest.approx(2.0)

    def test_requires_unit_vectors(self):
        with pytest.raises(ShapeError):
            random_prior.alignment_uniformity_loss([(np.ones(2), np.ones(2)), (np.ones(2), np.ones(2))])

    def test_needs_two_pairs(self):
        e1 = np.array([1.0, 0.0])
        with pytest.raises(ShapeError):
            random_prior.alignment_uniformity_loss([(e1, e1)])

    def test_uniformity_gradient_on_the_sphere(self, rng):
        # perturb along the tangent space so the unit-norm check still holds to first order
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        _, _, _, grad = random_prior._contrastive_terms(a, b, 2.0)
        pooled = np.concatenate([a, b])
        direction = rng.standard_normal(pooled.shape)
        direction -= pooled * np.sum(pooled * direction, axis=1, keepdims=True)
        h = 1e-6

        def uniform_at(shift):
            moved = pooled + shift * direction
            moved /= np.linalg.norm(moved, axis=1, keepdims=True)
            return random_prior._contrastive_terms(moved[:3], moved[3:], 2.0)[1]

        numeric = (uniform_at(h) - uniform_at(-h)) / (2 * h)
        assert np.sum(grad * direction) == pytest.approx(numeric, rel=1e-5, abs=1e-9)


class TestPretrain:
    def test_zero_steps_returns_initial_parameters(self, toy_encoder, rng):
        gen = GeneratorSpec(kind='dead_leaves', image_size=8)
        params0 = backprop.init_params(toy_encoder, rng)
        cfg = ContrastiveConfig(batch_size=4, steps=0)
        out = random_prior.pretrain_encoder(gen, toy_encoder, cfg, seed=0, params0=params0)
        np.testing.assert_array_equal(out.values, params0.values)

    def test_short_run_is_deterministic_and_logs(self, toy_encoder):
        gen = GeneratorSpec(kind='dead_leaves', image_size=8)
        cfg = ContrastiveConfig(batch_size=8, steps=4, learning_rate=0.1, log_every=2)
        records = []
        a = random_prior.pretrain_encoder(gen, toy_encoder, cfg, seed=1, pool_size=16,
                                          metrics_sink=records.append)
        b = random_prior.pretrain_encoder(gen, toy_encoder, cfg, seed=1, pool_size=16)
        np.testing.assert_array_equal(a.values, b.values)
        assert [r['step'] for r in records] == [2, 4]
        assert all(np.isfinite(r['loss']) for r in records)
        assert a.layout == toy_encoder.layout()

    def test_contrastive_loss_is_finite(self, toy_encoder, rng):
        params = backprop.init_params(toy_encoder, rng)
        views = rng.random((6, toy_encoder.input_dim))
        value = random_prior.contrastive_loss(toy_encoder, params, views, views, ContrastiveConfig(batch_size=6))
        # identical views: alignment is zero, uniformity is a log-mean of kernels in (0, 1]
        assert value <= 0.0

    def test_rejects_non_encoder(self, rng):
        gen = GeneratorSpec(kind='dead_leaves', image_size=8)
        mlp = ModelSpec(kind='mlp', input_dim=192, output_dim=3, hidden_dims=(4,))
        with pytest.raises(ShapeError):
            random_prior.pretrain_encoder(gen, mlp, ContrastiveConfig(batch_size=4, steps=1), seed=0)

    def test_pretraining_touches_no_ledger(self, toy_encoder, monkeypatch):
        registered = []
        monkeypatch.setattr(PrivacyLedger, 'register', lambda self, *args, **kwargs: registered.append(args))
        gen = GeneratorSpec(kind='dead_leaves', image_size=8)
        cfg = ContrastiveConfig(batch_size=8, steps=3, learning_rate=0.1)
        random_prior.pretrain_encoder(gen, toy_encoder, cfg, seed=0, pool_size=16)
        assert registered == []

    @pytest.mark.slow
    def test_pretraining_lowers_held_out_loss(self, toy_encoder):
        gen = GeneratorSpec(kind='dead_leaves', image_size=8)
        cfg = ContrastiveConfig(batch_size=32, steps=150, learning_rate=0.5)
        held_out = random_prior.generate_array(gen.with_seed(999), 64)
        augmenter = Augmenter(gen.image_size, gen.channels)
        gaps = []
        for seed in range(5):
            view_rng = np.random.default_rng(seed)
            view_a = np.stack([augmenter(x, view_rng) for x in held_out])
            view_b = np.stack([augmenter(x, view_rng) for x in held_out])
            initial = random_prior.pretrain_encoder(gen, toy_encoder, dataclasses.replace(cfg, steps=0), seed=seed)
            trained = random_prior.pretrain_encoder(gen, toy_encoder, cfg, seed=seed, pool_size=256)
            gaps.append(random_prior.contrastive_loss(toy_encoder, trained, view_a, view_b, cfg)
                        - random_prior.contrastive_loss(toy_encoder, initial, view_a, view_b, cfg))
        assert np.mean(gaps) < 0
