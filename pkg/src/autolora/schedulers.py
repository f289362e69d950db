"""Validation-driven learning-rate halving and the accuracy-driven loss scalars.

Epoch indices follow the training loop: ``ra_history[e]`` is the robust
validation accuracy of the parameters at the end of epoch ``e``.  Checkpoint
epochs are ``c_j = j * interval`` (``c_0 = 0``); the window closed at ``c_j``
covers the ``interval`` consecutive comparisons between epochs
``c_{j-1} .. c_j``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .objectives import ScalarPair

COND1 = "cond1"
COND2 = "cond2"


class SchedulerError(RuntimeError):
    """A scheduler method was called in a state where it is undefined."""


@dataclass(frozen=True)
class LrSchedulerConfig:
    eta0: float = 0.01
    checkpoint_interval: int = 5
    halving_factor: float = 0.5
    min_eta: float = 1e-5
    cond1_fraction: float = 0.75
    cond1_mode: str = "paper"   # or "improvement"

    def __post_init__(self):
        if self.eta0 <= 0 or self.min_eta <= 0 or self.checkpoint_interval < 1:
            raise ValueError(f"invalid LR scheduler config {self}")
        if not 0 < self.cond1_fraction < 1:
            raise ValueError(f"cond1_fraction must lie in (0, 1), got {self.cond1_fraction}")
        if self.cond1_mode not in ("paper", "improvement"):
            raise ValueError(f"cond1_mode must be 'paper' or 'improvement', got {self.cond1_mode!r}")


@dataclass(frozen=True)
class Decision:
    """Outcome of a checkpoint check.

    ``reasons`` lists every condition that fired; ``reason`` names the one
    logged, preferring the stagnation condition when both fire.
    """

    reasons: tuple[str, ...] = ()

    @property
    def halve(self) -> bool:
        return bool(self.reasons)

    @property
    def reason(self) -> str | None:
        if COND2 in self.reasons:
            return COND2
        return self.reasons[0] if self.reasons else None

    def __str__(self):
        return f"halve({self.reason})" if self.halve else "keep"


KEEP = Decision()


@dataclass
class LrScheduler:
    """State machine for the LR schedule; owns the best-so-far checkpoint."""

    cfg: LrSchedulerConfig = field(default_factory=LrSchedulerConfig)
    eta: float = field(init=False)
    ra_history: list[float] = field(default_factory=list, init=False)
    eta_history: list[float] = field(default_factory=list, init=False)
    best_ra: float | None = field(default=None, init=False)
    best_epoch: int | None = field(default=None, init=False)
    best_checkpoint: Any = field(default=None, init=False, repr=False)
    eta_at_last_checkpoint: float | None = field(default=None, init=False)
    best_at_last_checkpoint: float | None = field(default=None, init=False)
    halve_log: list[tuple[int, str]] = field(default_factory=list, init=False)

    def __post_init__(self):
        self.eta = self.cfg.eta0

    @property
    def epoch(self) -> int:
        """Index of the most recently recorded epoch (-1 before any)."""
        return len(self.ra_history) - 1

    def record_epoch(self, ra_val: float, checkpoint: Any = None) -> None:
        """Append this epoch's RA, trained at the current eta; keep the checkpoint on strict improvement."""
        if not 0.0 <= ra_val <= 1.0:
            raise ValueError(f"robust accuracy must lie in [0, 1], got {ra_val}")
        self.ra_history.append(float(ra_val))
        self.eta_history.append(self.eta)
        if self.best_ra is None or ra_val > self.best_ra:
            self.best_ra = float(ra_val)
            self.best_epoch = self.epoch
            self.best_checkpoint = checkpoint
        if self.epoch == 0:
            self.eta_at_last_checkpoint = self.eta
            self.best_at_last_checkpoint = self.best_ra

    def is_checkpoint(self, epoch: int | None = None) -> bool:
        epoch = self.epoch if epoch is None else epoch
        return epoch > 0 and epoch % self.cfg.checkpoint_interval == 0

    def check_conditions(self) -> Decision:
        """Evaluate both halving conditions at the current (checkpoint) epoch."""
        e = self.epoch
        if not self.is_checkpoint(e):
            raise SchedulerError(f"epoch {e} is not a checkpoint epoch (interval {self.cfg.checkpoint_interval})")
        w = self.cfg.checkpoint_interval
        window = self.ra_history[e - w:e + 1]
        rho = self.cfg.cond1_fraction
        if self.cfg.cond1_mode == "paper":
            decreases = sum(b < a for a, b in zip(window, window[1:]))
            cond1 = decreases <= rho * w
        else:
            increases = sum(b > a for a, b in zip(window, window[1:]))
            cond1 = increases <= (1 - rho) * w
        cond2 = (self.eta_at_last_checkpoint == self.eta_history[e]
                 and self.best_at_last_checkpoint == self.best_ra)
        self.eta_at_last_checkpoint = self.eta_history[e]
        self.best_at_last_checkpoint = self.best_ra
        return Decision(tuple(name for name, fired in ((COND1, cond1), (COND2, cond2)) if fired))

    def apply_halve(self, reason: str) -> Any:
        """Halve eta and hand back the stored best checkpoint for the restart."""
        if self.best_checkpoint is None:
            raise SchedulerError("cannot restart: no best checkpoint stored")
        self.eta = self.eta * self.cfg.halving_factor
        self.halve_log.append((self.epoch, reason))
        return self.best_checkpoint

    def should_stop(self, max_epochs: int) -> bool:
        return self.eta < self.cfg.min_eta or self.epoch >= max_epochs - 1


@dataclass(frozen=True)
class ScalarSchedulerConfig:
    alpha: float = 1.0
    lambda2_max: float = 6.0
    sa_subsample: float | None = None   # fraction of the train split; None = full pass

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.sa_subsample is not None and not 0 < self.sa_subsample <= 1:
            raise ValueError(f"sa_subsample must lie in (0, 1], got {self.sa_subsample}")


def compute_scalars(sa_train: float, cfg: ScalarSchedulerConfig = ScalarSchedulerConfig()) -> ScalarPair:
    """lambda1 = 1 - SA**alpha, lambda2 = lambda2_max * SA**alpha."""
    if not 0.0 <= sa_train <= 1.0:
        raise ValueError(f"standard accuracy must lie in [0, 1], got {sa_train}")
    sharpened = sa_train ** cfg.alpha
    return ScalarPair(1.0 - sharpened, cfg.lambda2_max * sharpened)
