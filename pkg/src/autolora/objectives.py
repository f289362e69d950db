"""Vanilla RFT, TWINS and AutoLoRa losses plus the gradient-similarity probe.

Each ``*_graph`` builder records the forward pass onto a single tape and
returns a :class:`LossGraph`; the public ``*_loss`` functions differentiate the
total and package a :class:`LossBundle`.  Keeping the graph around lets the
gradient-similarity probe differentiate the natural and adversarial parts of
the same forward pass separately.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, pgd
from .nn import ConfigurationError, ForwardMode, ParamSet, forward
from .tensor import Tensor, add, backward, exp, log_softmax, mean, mul, pick, recording, scale, sub, sum_

KL_FORWARD = "nat_adv"   # KL(p_nat || p_adv), the TRADES convention
KL_REVERSE = "adv_nat"


def ce_loss(logits, y) -> Tensor:
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(y, dtype=np.int64)
    z = logits.shape[1]
    if y.shape != (logits.shape[0],) or (y.size and (y.min() < 0 or y.max() >= z)):
        raise ValueError(f"labels must be {logits.shape[0]} integers in [0, {z})")
    return scale(mean(pick(log_softmax(logits), y)), -1.0)


def kl_loss(adv_logits, nat_logits, direction: str = KL_FORWARD) -> Tensor:
    """Batch mean of KL(softmax(nat) || softmax(adv)) (or the reverse)."""
    adv_logits = adv_logits if isinstance(adv_logits, Tensor) else Tensor(adv_logits)
    nat_logits = nat_logits if isinstance(nat_logits, Tensor) else Tensor(nat_logits)
    if adv_logits.shape != nat_logits.shape:
        raise ValueError(f"kl_loss shape mismatch: {adv_logits.shape} vs {nat_logits.shape}")
    if direction == KL_REVERSE:
        adv_logits, nat_logits = nat_logits, adv_logits
    elif direction != KL_FORWARD:
        raise ValueError(f"unknown KL direction {direction!r}")
    log_p = log_softmax(nat_logits)
    log_q = log_softmax(adv_logits)
    per_row = sum_(mul(exp(log_p), sub(log_p, log_q)), axis=1)
    return mean(per_row)


@dataclass(frozen=True)
class TwinsConfig:
    beta: float = 1.0
    gamma: float = 1.0


@dataclass(frozen=True)
class ScalarPair:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0 or self.lambda2 < 0.0:
            raise ConfigurationError(f"need lambda1 in [0, 1] and lambda2 >= 0, got {self}")


@dataclass
class LossGraph:
    """Recorded loss terms; ``total = sum(weights[k] * terms[k])``."""

    leaves: dict[str, Tensor]
    terms: dict[str, Tensor]
    weights: dict[str, float]
    natural: Tensor            # the natural objective as used by the GS probe
    adversarial: Tensor        # the adversarial objective as used by the GS probe
    total: Tensor
    x_adv: np.ndarray


@dataclass
class LossBundle:
    total: float
    terms: dict[str, float]
    weights: dict[str, float]
    grads: dict[str, np.ndarray] = field(repr=False)


def _leaves(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}


def _weighted_total(terms, weights) -> Tensor:
    total = None
    for key, term in terms.items():
        part = scale(term, weights[key])
        total = part if total is None else add(total, part)
    return total


def _adversarial(params, x, y, attack_cfg, x_adv):
    if x_adv is not None:
        return np.asarray(x_adv, dtype=np.float64)
    return pgd(params, x, y, attack_cfg, ForwardMode.BASE)


def _vanilla_parts(params, leaves, x, y, x_adv, mode, train, kl_direction):
    nat_logits = forward(params, x, mode, train, leaves)
    adv_logits = forward(params, x_adv, mode, train, leaves)
    return ce_loss(nat_logits, y), kl_loss(adv_logits, nat_logits, kl_direction)


def vanilla_graph(params: ParamSet, x, y, beta: float, attack_cfg: AttackConfig,
                  train: bool = True, x_adv=None, kl_direction: str = KL_FORWARD) -> LossGraph:
    if beta < 0:
        raise ConfigurationError(f"beta must be >= 0, got {beta}")
    x_adv = _adversarial(params, x, y, attack_cfg, x_adv)
    leaves = _leaves(params.trainable("vanilla"))
    with recording():
        nat, kl = _vanilla_parts(params, leaves, x, y, x_adv, ForwardMode.BASE, train, kl_direction)
        terms = {"natural": nat, "adv_ce": Tensor(0.0), "kl": kl}
        weights = {"natural": 1.0, "adv_ce": 0.0, "kl": float(beta)}
        total = add(nat, scale(kl, beta))
    return LossGraph(leaves, terms, weights, nat, kl, total, x_adv)


def twins_graph(params: ParamSet, x, y, cfg: TwinsConfig, attack_cfg: AttackConfig,
                train: bool = True, x_adv=None, kl_direction: str = KL_FORWARD) -> LossGraph:
    """Frozen-BN branch plus ``gamma`` times the adaptive branch, on one shared x_adv."""
    if params.bn_stats_frozen is None:
        raise ConfigurationError("TWINS needs frozen BN statistics (ParamSet.freeze_bn_stats)")
    x_adv = _adversarial(params, x, y, attack_cfg, x_adv)
    leaves = _leaves(params.trainable("twins"))
    g = float(cfg.gamma)
    with recording():
        nat_f, kl_f = _vanilla_parts(params, leaves, x, y, x_adv, ForwardMode.FROZEN_BN, train,
                                     kl_direction)
        nat_b, kl_b = _vanilla_parts(params, leaves, x, y, x_adv, ForwardMode.BASE, train,
                                     kl_direction)
        nat = add(nat_f, scale(nat_b, g))
        kl = add(kl_f, scale(kl_b, g))
        terms = {"natural": nat, "adv_ce": Tensor(0.0), "kl": kl}
        weights = {"natural": 1.0, "adv_ce": 0.0, "kl": float(cfg.beta)}
        total = add(nat, scale(kl, cfg.beta))
    return LossGraph(leaves, terms, weights, nat, kl, total, x_adv)


def autolora_graph(params: ParamSet, x, y, scalars: ScalarPair, attack_cfg: AttackConfig,
                   kl_teacher_grad: bool = False, train: bool = True, x_adv=None,
                   kl_direction: str = KL_FORWARD, teacher_logits=None) -> LossGraph:
    """Natural CE through the LoRA path, adversarial CE and KL through the base path.

    ``teacher_logits`` pins the soft labels to a fixed array, which is how the
    stop-gradient reading is checked against finite differences.
    """
    if params.lora is None:
        raise ConfigurationError("AutoLoRa loss needs LoRA factors (init_lora)")
    x_adv = _adversarial(params, x, y, attack_cfg, x_adv)
    leaves = _leaves(params.trainable("autolora"))
    l1, l2 = float(scalars.lambda1), float(scalars.lambda2)
    with recording():
        lora_logits = forward(params, x, ForwardMode.LORA, train, leaves)
        adv_logits = forward(params, x_adv, ForwardMode.BASE, train, leaves)
        nat = ce_loss(lora_logits, y)
        adv_ce = ce_loss(adv_logits, y)
        if teacher_logits is not None:
            teacher = Tensor(np.asarray(teacher_logits, dtype=np.float64))
        elif kl_teacher_grad:
            teacher = lora_logits
        else:
            teacher = lora_logits.detach()
        kl = kl_loss(adv_logits, teacher, kl_direction)
        terms = {"natural": nat, "adv_ce": adv_ce, "kl": kl}
        weights = {"natural": l1, "adv_ce": 1.0 - l1, "kl": l2}
        total = _weighted_total(terms, weights)
        adversarial = add(scale(adv_ce, 1.0 - l1), scale(kl, l2))
    return LossGraph(leaves, terms, weights, nat, adversarial, total, x_adv)


def bundle(graph: LossGraph) -> LossBundle:
    gm = backward(graph.total)
    return LossBundle(
        total=graph.total.item(),
        terms={k: t.item() for k, t in graph.terms.items()},
        weights=dict(graph.weights),
        grads={name: gm[leaf] for name, leaf in graph.leaves.items()},
    )


def vanilla_rft_loss(params, x, y, beta, attack_cfg, **kw) -> LossBundle:
    return bundle(vanilla_graph(params, x, y, beta, attack_cfg, **kw))


def twins_loss(params, x, y, cfg: TwinsConfig, attack_cfg, **kw) -> LossBundle:
    return bundle(twins_graph(params, x, y, cfg, attack_cfg, **kw))


def autolora_loss(params, x, y, scalars: ScalarPair, attack_cfg, kl_teacher_grad=False,
                  **kw) -> LossBundle:
    return bundle(autolora_graph(params, x, y, scalars, attack_cfg, kl_teacher_grad, **kw))


def fe_gradient(graph: LossGraph, root: Tensor, params: ParamSet) -> np.ndarray:
    """Flattened, concatenated gradient of ``root`` w.r.t. every feature-extractor tensor."""
    gm = backward(root)
    return np.concatenate([gm[graph.leaves[name]].ravel() for name in params.theta1])


def cosine(u: np.ndarray, v: np.ndarray) -> float | None:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return None
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def graph_similarity(graph: LossGraph, params: ParamSet) -> float | None:
    """Cosine between FE gradients of the natural and adversarial objectives; None if either is zero."""
    return cosine(fe_gradient(graph, graph.natural, params),
                  fe_gradient(graph, graph.adversarial, params))


def gradient_similarity(params: ParamSet, x, y, method: str, method_cfg, attack_cfg: AttackConfig,
                        train: bool = False, x_adv=None) -> float | None:
    """GS for one batch.  ``method_cfg`` is beta (vanilla), a TwinsConfig, or a ScalarPair."""
    if len(y) == 0:
        raise ValueError("gradient_similarity needs a non-empty batch")
    params = params.copy()  # train-mode forwards touch running statistics
    if method == "vanilla":
        graph = vanilla_graph(params, x, y, method_cfg, attack_cfg, train, x_adv)
    elif method == "twins":
        graph = twins_graph(params, x, y, method_cfg, attack_cfg, train, x_adv)
    elif method == "autolora":
        graph = autolora_graph(params, x, y, method_cfg, attack_cfg, train=train, x_adv=x_adv)
    else:
        raise ValueError(f"unknown method {method!r}")
    return graph_similarity(graph, params)
