"""L-infinity PGD on the cross-entropy loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConfigurationError, ForwardMode, ParamSet, forward
from .tensor import Tensor, backward, log_softmax, pick, scale, sum_


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    random_start: bool = False
    box: tuple[float, float] = (0.0, 1.0)

    def validate(self) -> None:
        low, high = self.box
        if self.epsilon < 0 or self.steps < 1 or not low < high:
            raise ConfigurationError(f"invalid attack config {self}")
        # epsilon == 0 is the degenerate ball and is allowed with any positive step
        if self.step_size <= 0 or (self.epsilon > 0 and self.step_size > self.epsilon):
            raise ConfigurationError(f"step_size must satisfy 0 < step_size <= epsilon: {self}")


def pgd(params: ParamSet, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        mode: ForwardMode = ForwardMode.BASE, rng: np.random.Generator | None = None) -> np.ndarray:
    """Signed-gradient ascent on CE, projected onto the eps-ball and the input box.

    BN layers use stored statistics and no parameter receives a gradient;
    only the input is a leaf on the tape.
    """
    cfg.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    low, high = cfg.box
    lo = np.maximum(x - cfg.epsilon, low)
    hi = np.minimum(x + cfg.epsilon, high)
    if cfg.epsilon == 0:
        return x.copy()
    x_adv = x.copy()
    if cfg.random_start:
        rng = rng if rng is not None else np.random.default_rng()
        x_adv = np.clip(x_adv + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), lo, hi)
    for _ in range(cfg.steps):
        leaf = Tensor(x_adv, requires_grad=True)
        logits = forward(params, leaf, mode, train=False)
        # summed CE: its sign pattern is the same as the batch mean
        loss = scale(sum_(pick(log_softmax(logits), y)), -1.0)
        grad = backward(loss)[leaf]
        x_adv = np.clip(x_adv + cfg.step_size * np.sign(grad), lo, hi)
    return x_adv
