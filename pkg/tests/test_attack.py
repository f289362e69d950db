import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autolora.attack import AttackConfig, pgd
from autolora.nn import ConfigurationError, ModelSpec, init_params
from autolora.objectives import ce_loss
from autolora.nn import forward


def logistic_1d(w: float):
    """h(x) = [0, w * relu(x)]: a binary logistic model in one input."""
    params = init_params(ModelSpec(1, (1,), 2, use_batchnorm=False), np.random.default_rng(0))
    params.theta1["fe0.weight"] = np.array([[1.0]])
    params.theta1["fe0.bias"] = np.array([0.0])
    params.theta2["head.weight"] = np.array([[0.0, w]])
    params.theta2["head.bias"] = np.zeros(2)
    return params


def affine_model(rng, d=4, z=3):
    """ReLU stays active on the unit box, so logits are affine in x and CE is convex."""
    params = init_params(ModelSpec(d, (6,), z, use_batchnorm=False), rng)
    params.theta1["fe0.weight"] = np.abs(params.theta1["fe0.weight"])
    params.theta1["fe0.bias"] = np.full(6, 5.0)
    return params


def test_zero_budget_returns_input(small_model, small_batch):
    x, y = small_batch
    out = pgd(small_model, x, y, AttackConfig(epsilon=0.0, step_size=0.01, random_start=True))
    assert np.array_equal(out, x)


@pytest.mark.parametrize("w", [0.5, 2.0])
def test_logistic_single_step_moves_up_for_class_zero(w):
    # d/dx CE(label 0) = w * sigmoid(w x) > 0 for w > 0, so one step adds +step_size
    cfg = AttackConfig(epsilon=0.1, step_size=0.05, steps=1)
    x = np.array([[0.4]])
    out = pgd(logistic_1d(w), x, np.array([0]), cfg)
    assert out[0, 0] == pytest.approx(0.45, abs=1e-15)


def test_logistic_label_one_moves_down():
    cfg = AttackConfig(epsilon=0.1, step_size=0.05, steps=1)
    out = pgd(logistic_1d(1.0), np.array([[0.4]]), np.array([1]), cfg)
    assert out[0, 0] == pytest.approx(0.35, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), eps=st.floats(0.001, 0.3), ratio=st.floats(0.05, 1.0),
       steps=st.integers(1, 5), random_start=st.booleans())
def test_ball_and_box_containment(seed, eps, ratio, steps, random_start):
    rng = np.random.default_rng(seed)
    params = init_params(ModelSpec(5, (7,), 3), rng)
    x = rng.uniform(0, 1, size=(16, 5))
    x[0] = 0.0
    x[1] = 1.0
    y = rng.integers(0, 3, size=16)
    cfg = AttackConfig(epsilon=eps, step_size=eps * ratio, steps=steps, random_start=random_start)
    out = pgd(params, x, y, cfg, rng=rng)
    assert np.max(np.abs(out - x)) <= eps + 1e-12
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_deterministic_without_random_start(small_model, small_batch):
    x, y = small_batch
    cfg = AttackConfig(epsilon=0.1, step_size=0.02, steps=5)
    assert np.array_equal(pgd(small_model, x, y, cfg), pgd(small_model, x, y, cfg))


def test_attack_does_not_touch_running_stats(small_model, small_batch):
    before = {k: v.copy() for k, v in small_model.bn_stats.items()}
    pgd(small_model, *small_batch, AttackConfig())
    for k in before:
        assert np.array_equal(before[k], small_model.bn_stats[k])


def test_ce_does_not_decrease_on_affine_models(rng):
    for _ in range(20):
        params = affine_model(rng)
        x = rng.uniform(0.1, 0.9, size=(32, 4))
        y = rng.integers(0, 3, size=32)
        out = pgd(params, x, y, AttackConfig(epsilon=0.05, step_size=0.0125, steps=4))
        before = ce_loss(forward(params, x), y).item()
        after = ce_loss(forward(params, out), y).item()
        assert after >= before


@pytest.mark.parametrize("cfg", [
    AttackConfig(epsilon=0.1, step_size=0.2),
    AttackConfig(epsilon=0.1, step_size=0.0),
    AttackConfig(steps=0),
    AttackConfig(box=(1.0, 0.0)),
])
def test_invalid_configs(cfg, small_model, small_batch):
    with pytest.raises(ConfigurationError):
        pgd(small_model, *small_batch, cfg)
