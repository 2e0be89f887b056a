#!/usr/bin/env python3
"""
Shared pytest setup: the `slow` marker, a hypothesis profile and small trained fixtures
"""

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from base_forecaster import ModelConfig, OptimizerConfig, init_model, pretrain
from lora_adapters import AdapterConfig
from mixft_pipeline import FinetuneSettings
from series_data import WindowSpec, window_corpus
from synthetic_regimes import pretraining_corpus

settings.register_profile(
    "mixft",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("mixft")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run desk-scale end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale run, skipped unless --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY_SPEC = WindowSpec(context_length=32, horizon=4, stride=1)
TINY_MODEL = ModelConfig(patch_size=8, hidden_dim=8, num_blocks=1, horizon=4, context_length=32, seed=0)


@pytest.fixture(scope="session")
def tiny_model():
    """Briefly pretrained small forecaster"""
    corpus = pretraining_corpus(num_series=4, length=120, seed=0, period_range=(4.0, 16.0))
    windows = window_corpus(corpus, TINY_SPEC)
    model, _ = pretrain(init_model(TINY_MODEL), windows,
                        OptimizerConfig(learning_rate=3e-3, batch_size=32, max_steps=30),
                        np.random.default_rng(0))
    return model


@pytest.fixture
def tiny_settings():
    return FinetuneSettings(
        window=TINY_SPEC,
        adapter=AdapterConfig(rank=2, alpha=4.0, dropout=0.1, seed=0),
        optim=OptimizerConfig(learning_rate=1e-3, batch_size=16, max_steps=5),
        seed=0,
    )
