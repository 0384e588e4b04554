import numpy as np
import pytest
import torch

from madpan.backbone import (
    ToyDenoiserConfig,
    make_stripe_latents,
    make_toy_model,
    train_toy_denoiser,
)
from madpan.conditioning import ToyTextEmbedder
from madpan.features import RandomConvFeatures
from madpan.sampler import NoiseSchedule

TOY_CONFIG = ToyDenoiserConfig()


@pytest.fixture(scope="session")
def extractor():
    return RandomConvFeatures(seed=0)


@pytest.fixture(scope="session")
def embedder():
    return ToyTextEmbedder(dim=TOY_CONFIG.context_dim)


@pytest.fixture(scope="session")
def toy_schedule():
    return NoiseSchedule.default_toy(100)


@pytest.fixture(scope="session")
def toy_model():
    """Untrained but deterministically initialized denoiser."""
    return make_toy_model(TOY_CONFIG, init_seed=0)


@pytest.fixture(scope="session")
def trained_model(toy_schedule, embedder):
    """Toy denoiser trained on oriented stripe textures; shared across the
    slower behavioral tests so training happens once per session."""
    model = make_toy_model(TOY_CONFIG, init_seed=0)
    data = make_stripe_latents(128, 16, TOY_CONFIG.latent_channels, seed=3)
    stats = train_toy_denoiser(
        model, data, toy_schedule, steps=400, seed=11,
        context=embedder.null_embedding(),
    )
    assert stats["final_loss"] < stats["initial_loss"]
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _single_thread():
    # keeps timings and float reductions stable across machines
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield
