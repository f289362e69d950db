import numpy as np
import pytest

from autolora.nn import LoRaConfig, ModelSpec, init_lora, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return ModelSpec(input_dim=8, hidden_dims=(16, 16), num_classes=3)


def warm_bn(params, rng, n=64):
    """Give running statistics non-trivial values so eval-mode BN is not the identity."""
    for key in params.bn_stats:
        size = params.bn_stats[key].shape
        if key.endswith("running_mean"):
            params.bn_stats[key] = rng.normal(0, 0.3, size=size)
        else:
            params.bn_stats[key] = rng.uniform(0.5, 2.0, size=size)
    return params


def make_gradcheck_model(rng, spec=None):
    """Warm BN, distinct frozen/adaptive stats and non-zero B so every branch is exercised."""
    params = warm_bn(init_params(spec or ModelSpec(8, (16, 16), 3), rng), rng)
    params.freeze_bn_stats()
    params = init_lora(params, LoRaConfig(rank=4, init_std=0.3), rng)
    # non-zero B so the LoRA branch actually differs from the base path
    for k in params.lora:
        if k.endswith("lora_B"):
            params.lora[k] = rng.normal(0, 0.2, size=params.lora[k].shape)
    for k in params.bn_stats:
        params.bn_stats[k] = params.bn_stats[k] * rng.uniform(0.8, 1.2, size=params.bn_stats[k].shape)
    return params


@pytest.fixture
def small_model(small_spec, rng):
    return make_gradcheck_model(rng, small_spec)


@pytest.fixture
def small_batch(rng):
    x = rng.uniform(0.1, 0.9, size=(4, 8))
    y = np.array([0, 1, 2, 1])
    return x, y
