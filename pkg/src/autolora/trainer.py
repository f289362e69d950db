"""Fine-tuning loops for vanilla RFT, TWINS and AutoLoRa, plus source-task pretraining."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .attack import AttackConfig, pgd
from .data import Dataset, batches
from .nn import (ConfigurationError, ForwardMode, LoRaConfig, ModelSpec, ParamSet, forward,
                 init_head, init_lora, init_params)
from .objectives import (KL_FORWARD, LossGraph, ScalarPair, TwinsConfig, autolora_graph, bundle,
                         ce_loss, graph_similarity, twins_graph, vanilla_graph)
from .schedulers import LrScheduler, LrSchedulerConfig, ScalarSchedulerConfig, compute_scalars
from .tensor import Tensor, backward, recording

log = logging.getLogger(__name__)

METHODS = ("vanilla", "twins", "autolora")


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN/Inf loss; ``rows`` holds the log up to and including the failure."""

    def __init__(self, message: str, rows: list["EpochLog"]):
        super().__init__(message)
        self.rows = rows


class DisentanglementError(AssertionError):
    """The natural term of the AutoLoRa loss leaked a gradient into the feature extractor."""


@dataclass(frozen=True)
class TrainConfig:
    method: str = "autolora"
    max_epochs: int = 60
    batch_size: int = 128
    weight_decay: float = 1e-4
    attack: AttackConfig = AttackConfig()
    eval_attack: AttackConfig = AttackConfig()
    beta: float | None = None                     # vanilla RFT
    twins: TwinsConfig = TwinsConfig()
    lora: LoRaConfig = LoRaConfig()
    scalars: ScalarSchedulerConfig = ScalarSchedulerConfig()
    lr_scheduler: LrSchedulerConfig = LrSchedulerConfig()
    lr: float = 0.01                              # fixed LR for baselines
    use_lr_scheduler: bool | None = None          # None: on for autolora only
    momentum: float = 0.0                         # plain SGD unless set
    kl_teacher_grad: bool = False
    kl_direction: str = KL_FORWARD
    gs_every: int = 1                             # 0 disables the GS probe
    disentangle_check_every: int = 1              # 0 disables the exact-zero check
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.max_epochs < 1 or self.batch_size < 1 or self.weight_decay < 0:
            raise ConfigurationError("need max_epochs >= 1, batch_size >= 1, weight_decay >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.method == "vanilla" and self.beta is None:
            raise ConfigurationError("vanilla RFT needs beta")

    @property
    def scheduled(self) -> bool:
        return self.method == "autolora" if self.use_lr_scheduler is None else self.use_lr_scheduler


@dataclass
class EpochLog:
    epoch: int
    eta: float
    lambda1: float | None
    lambda2: float | None
    sa_train: float
    sa_val: float
    ra_val: float
    gs: float | None
    loss_total: float
    loss_nat: float
    loss_adv_ce: float
    loss_kl: float
    seconds: float

    def row(self) -> list[str]:
        return ["" if v is None else repr(v) if isinstance(v, float) else str(v)
                for v in asdict(self).values()]


LOG_COLUMNS = [f.name for f in fields(EpochLog)]


def write_log_csv(rows: list[EpochLog], fh=None) -> str:
    buf = fh if fh is not None else io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow(r.row())
    return buf.getvalue() if fh is None else ""


@dataclass
class RunResult:
    best_params: ParamSet
    rows: list[EpochLog]
    best_epoch: int
    best_ra_val: float
    halve_log: list[tuple[int, str]] = field(default_factory=list)
    final_params: ParamSet | None = None
    disentangle_checks: int = 0

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_ra_val": self.best_ra_val,
            "epochs_run": len(self.rows),
            "halve_log": [list(h) for h in self.halve_log],
        }


def _decays(name: str) -> bool:
    return "lora_" in name or (name.endswith(".weight") and "bn_" not in name)


def sgd_step(params: ParamSet, grads: dict[str, np.ndarray], eta: float, weight_decay: float,
             names=None, momentum: float = 0.0, velocity: dict | None = None) -> ParamSet:
    """``p <- p - eta * (g + wd * p)``; biases and BN affine parameters skip the decay.

    ``names`` lists the tensors that must be updated (default: every key of
    ``grads``).  Arrays are replaced, never written in place, so earlier
    snapshots stay valid.  With ``momentum > 0`` the step uses heavy-ball
    buffers kept in ``velocity`` (``v <- momentum * v + g``, ``p <- p - eta * v``).
    """
    names = list(grads) if names is None else list(names)
    if momentum and velocity is None:
        raise ValueError("momentum needs a velocity dict to carry buffers between steps")
    for name in names:
        if name not in grads:
            raise KeyError(f"sgd_step: no gradient for trainable tensor {name!r}")
        p = _lookup(params, name)
        g = grads[name]
        if weight_decay and _decays(name):
            g = g + weight_decay * p
        if momentum:
            g = momentum * velocity[name] + g if name in velocity else g
            velocity[name] = g
        params.set(name, p - eta * g)
    return params


def _lookup(params: ParamSet, name: str) -> np.ndarray:
    for group in (params.theta1, params.theta2, params.lora or {}):
        if name in group:
            return group[name]
    raise KeyError(name)


def accuracy(params: ParamSet, x: np.ndarray, y: np.ndarray, mode=ForwardMode.BASE,
             batch_size: int = 1024) -> float:
    if len(y) == 0:
        return float("nan")
    correct = 0
    for s in range(0, len(y), batch_size):
        logits = forward(params, x[s:s + batch_size], mode, train=False).data
        correct += int((logits.argmax(axis=1) == y[s:s + batch_size]).sum())
    return correct / len(y)


def evaluate(params: ParamSet, ds: Dataset, attack: AttackConfig,
             batch_size: int = 1024) -> tuple[float, float]:
    """(standard accuracy, PGD robust accuracy) through the base path."""
    if len(ds) == 0:
        return float("nan"), float("nan")
    sa = accuracy(params, ds.x, ds.y, batch_size=batch_size)
    x_adv = np.concatenate([pgd(params, ds.x[s:s + batch_size], ds.y[s:s + batch_size], attack,
                                rng=np.random.default_rng(s))
                            for s in range(0, len(ds), batch_size)])
    ra = accuracy(params, x_adv, ds.y, batch_size=batch_size)
    return sa, ra


def _natural_fe_grad_is_zero(graph: LossGraph, params: ParamSet) -> bool:
    gm = backward(graph.natural)
    return all(not np.any(gm[graph.leaves[name]]) for name in params.theta1)


def run(cfg: TrainConfig, pretrained: ParamSet, train: Dataset, val: Dataset,
        batch_hook: Callable[[int, int, LossGraph, ParamSet], None] | None = None) -> RunResult:
    """Fine-tune ``pretrained`` on ``train`` and keep the best robust-validation checkpoint."""
    if pretrained.spec.input_dim != train.dim:
        raise ConfigurationError(f"pretrained FE expects d={pretrained.spec.input_dim}, data has d={train.dim}")
    rng = np.random.default_rng(cfg.seed)
    params = init_head(pretrained.copy(), train.num_classes, rng)
    params.lora = None
    if cfg.method == "twins" and params.bn_stats_frozen is None:
        params.freeze_bn_stats()
    if cfg.method == "autolora":
        params = init_lora(params, cfg.lora, rng)
    trainable = list(params.trainable(cfg.method))
    attack_rng = np.random.default_rng([cfg.seed, 7919])
    scheduler = LrScheduler(cfg.lr_scheduler) if cfg.scheduled else None
    eta = scheduler.eta if scheduler else cfg.lr
    velocity: dict[str, np.ndarray] = {}

    rows: list[EpochLog] = []
    best_params, best_ra, best_epoch = None, -1.0, -1
    checks = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        mode = ForwardMode.LORA if cfg.method == "autolora" else ForwardMode.BASE
        sa_x, sa_y = train.x, train.y
        if cfg.method == "autolora" and cfg.scalars.sa_subsample is not None:
            k = max(1, int(round(len(train) * cfg.scalars.sa_subsample)))
            idx = np.random.default_rng([cfg.seed, epoch, 1]).choice(len(train), k, replace=False)
            sa_x, sa_y = train.x[idx], train.y[idx]
        sa_train = accuracy(params, sa_x, sa_y, mode)
        scalars = compute_scalars(sa_train, cfg.scalars) if cfg.method == "autolora" else None

        sums = np.zeros(4)
        gs_values = []
        nb = 0
        for b, (x, y) in enumerate(batches(train, cfg.batch_size, cfg.seed, epoch)):
            x_adv = pgd(params, x, y, cfg.attack, ForwardMode.BASE, rng=attack_rng)
            if cfg.method == "vanilla":
                graph = vanilla_graph(params, x, y, cfg.beta, cfg.attack, True, x_adv, cfg.kl_direction)
            elif cfg.method == "twins":
                graph = twins_graph(params, x, y, cfg.twins, cfg.attack, True, x_adv, cfg.kl_direction)
            else:
                graph = autolora_graph(params, x, y, scalars, cfg.attack, cfg.kl_teacher_grad, True,
                                       x_adv, cfg.kl_direction)
            lb = bundle(graph)
            if not math.isfinite(lb.total):
                rows.append(EpochLog(epoch, eta, *(_lams(scalars)), sa_train, float("nan"), float("nan"),
                                     None, lb.total, lb.terms["natural"], lb.terms["adv_ce"],
                                     lb.terms["kl"], time.perf_counter() - t0))
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {b}", rows)
            if cfg.method == "autolora":
                if cfg.disentangle_check_every and b % cfg.disentangle_check_every == 0:
                    if not _natural_fe_grad_is_zero(graph, params):
                        raise DisentanglementError(f"natural term reached the FE at epoch {epoch}, batch {b}")
                    checks += 1
            elif cfg.gs_every and b % cfg.gs_every == 0:
                gs = graph_similarity(graph, params)
                if gs is not None:
                    gs_values.append(gs)
            if batch_hook is not None:
                batch_hook(epoch, b, graph, params)
            sums += [lb.total, lb.terms["natural"], lb.terms["adv_ce"], lb.terms["kl"]]
            nb += 1
            sgd_step(params, lb.grads, eta, cfg.weight_decay, trainable, cfg.momentum, velocity)

        sa_val, ra_val = evaluate(params, val, cfg.eval_attack)
        means = sums / max(nb, 1)
        gs = float(np.mean(gs_values)) if gs_values else None
        rows.append(EpochLog(epoch, eta, *_lams(scalars), sa_train, sa_val, ra_val, gs,
                             *map(float, means), time.perf_counter() - t0))
        log.info("epoch %d eta=%.3g sa_train=%.3f sa_val=%.3f ra_val=%.3f gs=%s",
                 epoch, eta, sa_train, sa_val, ra_val, "-" if gs is None else f"{gs:.3f}")
        if ra_val > best_ra:
            best_params, best_ra, best_epoch = params.copy(), ra_val, epoch

        if scheduler is not None:
            scheduler.record_epoch(ra_val, best_params if best_epoch == epoch else None)
            if scheduler.is_checkpoint():
                decision = scheduler.check_conditions()
                if decision.halve:
                    params = scheduler.apply_halve(decision.reason).copy()
                    eta = scheduler.eta
                    velocity.clear()
                    log.info("epoch %d: %s -> eta=%.3g, restart from epoch %d",
                             epoch, decision, eta, scheduler.best_epoch)
            if scheduler.should_stop(cfg.max_epochs):
                break

    return RunResult(best_params, rows, best_epoch, best_ra,
                     list(scheduler.halve_log) if scheduler else [], params, checks)


def _lams(scalars: ScalarPair | None):
    return (None, None) if scalars is None else (scalars.lambda1, scalars.lambda2)


def pretrain(spec: ModelSpec, ds: Dataset, epochs: int, adversarial: bool = False,
             attack: AttackConfig = AttackConfig(epsilon=4 / 255, step_size=1 / 255),
             lr: float = 0.05, batch_size: int = 128, weight_decay: float = 1e-4,
             seed: int = 0) -> ParamSet:
    """Train FE + head on a source task; the final BN statistics become the frozen copy."""
    if spec.input_dim != ds.dim or spec.num_classes != ds.num_classes:
        raise ConfigurationError(f"model {spec} does not fit dataset d={ds.dim}, z={ds.num_classes}")
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    attack_rng = np.random.default_rng([seed, 7919])
    names = list(params.trainable("vanilla"))
    for epoch in range(epochs):
        for x, y in batches(ds, batch_size, seed, epoch):
            if adversarial:
                x = pgd(params, x, y, attack, rng=attack_rng)
            leaves = {n: Tensor(a, requires_grad=True) for n, a in params.trainable("vanilla").items()}
            with recording():
                loss = ce_loss(forward(params, x, ForwardMode.BASE, True, leaves), y)
            gm = backward(loss)
            sgd_step(params, {n: gm[leaves[n]] for n in names}, lr, weight_decay, names)
    params.freeze_bn_stats()
    return params
