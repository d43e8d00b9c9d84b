"""Shared fixtures: small models, toy datasets and coarse accounting settings."""
import numpy as np
import pytest

from models.data import GeneratorSpec
from models.network import FrontendSpec, ModelSpec
from models.privacy import AccountingConfig
from utils import random_prior
from utils.ledger import PrivacyLedger

TOY_IMAGE_SIZE = 8
LEDGER_SLACK = 0.01


@pytest.fixture(scope='session', autouse=True)
def ledger_safety():
    """Every ledger closed anywhere in the suite stays within its budget plus 0.01."""
    original = PrivacyLedger.close
    closed = []

    def checked_close(self):
        epsilon = original(self)
        closed.append((self.budget.epsilon, epsilon))
        assert epsilon <= self.budget.epsilon + LEDGER_SLACK, (
            f"ledger closed at epsilon={epsilon} above budget {self.budget.epsilon}")
        return epsilon

    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(PrivacyLedger, 'close', checked_close)
        yield closed


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def coarse_accounting():
    """Coarser loss grid so composition-heavy tests stay fast."""
    return AccountingConfig(grid_spacing=1e-3, eps_error=0.01, tail_bound=1e-12)


@pytest.fixture
def toy_frontend():
    return FrontendSpec(patch_size=4, num_filters=2, seed=0, image_size=TOY_IMAGE_SIZE, channels=3, stride=2)


@pytest.fixture
def toy_encoder(toy_frontend):
    return ModelSpec(
        kind='encoder',
        input_dim=TOY_IMAGE_SIZE * TOY_IMAGE_SIZE * 3,
        output_dim=4,
        hidden_dims=(8,),
        activation='tanh',
        frontend=toy_frontend,
    )


@pytest.fixture
def private_spec():
    return GeneratorSpec(kind='spectral_noise', image_size=TOY_IMAGE_SIZE)


@pytest.fixture
def toy_train(private_spec):
    return random_prior.make_private_dataset(private_spec, n=60, seed=1)


@pytest.fixture
def toy_test(private_spec):
    return random_prior.make_private_dataset(private_spec, n=30, seed=2)
