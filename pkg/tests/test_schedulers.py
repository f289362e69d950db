import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autolora.schedulers import (COND1, COND2, Decision, LrScheduler, LrSchedulerConfig,
                                 ScalarSchedulerConfig, SchedulerError, compute_scalars)

from conftest import warm_bn


def drive(ra, mode, interval=4):
    """Feed an RA trace; at each checkpoint record the fired conditions and halve when any fires."""
    sched = LrScheduler(LrSchedulerConfig(checkpoint_interval=interval, cond1_mode=mode))
    decisions = []
    for epoch, value in enumerate(ra):
        sched.record_epoch(value, checkpoint=f"params@{epoch}")
        if sched.is_checkpoint():
            decision = sched.check_conditions()
            decisions.append(decision.reasons)
            if decision.halve:
                sched.apply_halve(decision.reason)
    return decisions, sched


C1, C2, BOTH, KEEP = (COND1,), (COND2,), (COND1, COND2), ()

# (trace, interval, expected decisions in paper mode, expected in improvement mode)
TRACES = [
    ("rising", [0.1, 0.2, 0.3, 0.4, 0.5], 4, [C1], [KEEP]),
    ("falling", [0.5, 0.4, 0.3, 0.2, 0.1], 4, [C2], [BOTH]),
    ("flat", [0.3] * 5, 4, [BOTH], [BOTH]),
    ("zigzag up", [0.1, 0.3, 0.2, 0.4, 0.35], 4, [C1], [KEEP]),
    ("one step then flat", [0.2, 0.3, 0.3, 0.3, 0.3], 4, [C1], [C1]),
    ("three drops then record", [0.5, 0.4, 0.3, 0.2, 0.6], 4, [C1], [C1]),
    ("tie with best is not a record", [0.4, 0.3, 0.2, 0.1, 0.4], 4, [BOTH], [BOTH]),
    ("rise then fall", [0.1, 0.2, 0.3, 0.4, 0.5, 0.45, 0.4, 0.35, 0.3], 4, [C1, KEEP], [KEEP, BOTH]),
    ("rise then plateau", [0.1, 0.2, 0.3, 0.4, 0.5, 0.5, 0.5, 0.5, 0.5], 4, [C1, C1], [KEEP, BOTH]),
    ("W=5 rising", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 5, [C1], [KEEP]),
    ("W=5 four drops", [0.6, 0.5, 0.4, 0.3, 0.2, 0.25], 5, [C2], [BOTH]),
    ("W=5 noisy climb", [0.2, 0.3, 0.25, 0.35, 0.3, 0.4], 5, [C1], [KEEP]),
    ("W=1 halving disarms stagnation", [0.1, 0.2, 0.2, 0.1], 1, [C1, C1, KEEP], [KEEP, BOTH, C1]),
    ("W=2 record each window", [0.1, 0.3, 0.2, 0.4, 0.3], 2, [C1, C1], [KEEP, KEEP]),
]


@pytest.mark.parametrize("name, ra, interval, paper, improvement", TRACES, ids=[t[0] for t in TRACES])
def test_decision_table(name, ra, interval, paper, improvement):
    assert drive(ra, "paper", interval)[0] == paper
    assert drive(ra, "improvement", interval)[0] == improvement


def test_table_covers_every_outcome():
    seen = {tuple(d) for t in TRACES for d in t[3] + t[4]}
    assert {C1, C2, BOTH, KEEP} <= seen
    assert len(TRACES) >= 12


def test_stagnation_is_logged_in_preference():
    assert Decision(BOTH).reason == COND2
    assert Decision(C1).reason == COND1
    assert Decision().reason is None and not Decision().halve
    _, sched = drive([0.3] * 5, "paper")
    assert sched.halve_log == [(4, COND2)]


def test_check_is_pure_in_the_trace():
    ra = [0.2, 0.5, 0.1, 0.4, 0.4, 0.3, 0.6, 0.6, 0.2, 0.2, 0.9]
    for mode in ("paper", "improvement"):
        first, a = drive(ra, mode, 2)
        second, b = drive(list(ra), mode, 2)
        assert first == second and a.halve_log == b.halve_log and a.eta == b.eta


def test_record_epoch_bookkeeping():
    sched = LrScheduler()
    assert sched.best_ra is None and sched.epoch == -1
    for e, r in enumerate([0.1, 0.3, 0.2]):
        sched.record_epoch(r, checkpoint=e)
    assert (sched.best_ra, sched.best_epoch, sched.best_checkpoint) == (0.3, 1, 1)
    sched.record_epoch(0.3, checkpoint="tie")
    assert sched.best_checkpoint == 1
    with pytest.raises(ValueError):
        sched.record_epoch(1.5)


def test_off_checkpoint_and_missing_checkpoint_errors():
    sched = LrScheduler()
    sched.record_epoch(0.2)
    with pytest.raises(SchedulerError):
        sched.check_conditions()
    with pytest.raises(SchedulerError):
        sched.apply_halve(COND1)


def test_eta_after_k_halvings_is_exact():
    sched = LrScheduler()
    sched.record_epoch(0.5, checkpoint="best")
    for k in range(1, 15):
        sched.apply_halve(COND1)
        assert sched.eta == 0.01 * 2.0 ** -k
        assert sched.eta == sched.cfg.eta0 * 0.5 ** len(sched.halve_log)


def test_first_halving_gives_half_eta():
    sched = LrScheduler()
    sched.record_epoch(0.5, checkpoint="best")
    sched.apply_halve(COND2)
    assert sched.eta == 0.005


@pytest.mark.parametrize("mode", ["paper", "improvement"])
def test_terminates_after_ten_halvings(mode):
    sched = LrScheduler(LrSchedulerConfig(cond1_mode=mode))
    epoch = 0
    while True:
        sched.record_epoch(0.4, checkpoint="best")
        if sched.is_checkpoint():
            decision = sched.check_conditions()
            if decision.halve:
                sched.apply_halve(decision.reason)
        if sched.should_stop(max_epochs=10_000):
            break
        epoch += 1
    assert len(sched.halve_log) == 10
    assert sched.eta == 0.01 / 1024 and sched.eta < 1e-5
    assert epoch == 50


def test_should_stop_at_epoch_budget():
    sched = LrScheduler()
    for _ in range(3):
        sched.record_epoch(0.1)
    assert not sched.should_stop(4)
    assert sched.should_stop(3)


def test_restart_returns_best_checkpoint_bit_exactly(small_model, rng):
    sched = LrScheduler(LrSchedulerConfig(checkpoint_interval=2))
    best = small_model.copy()
    sched.record_epoch(0.2, checkpoint=small_model.copy())
    sched.record_epoch(0.6, checkpoint=best)
    later = warm_bn(small_model.copy(), rng)
    later.theta1["fe0.weight"] = later.theta1["fe0.weight"] + 1.0
    sched.record_epoch(0.5, checkpoint=later)
    restored = sched.apply_halve(sched.check_conditions().reason or COND1)
    for group, arrays in best.groups().items():
        for k, v in arrays.items():
            assert restored.groups()[group][k].tobytes() == v.tobytes(), (group, k)


def test_config_validation():
    for bad in (dict(eta0=0), dict(checkpoint_interval=0), dict(cond1_fraction=1.0),
                dict(min_eta=-1), dict(cond1_mode="other")):
        with pytest.raises(ValueError):
            LrSchedulerConfig(**bad)


@pytest.mark.parametrize("sa, alpha, expected", [
    (0.0, 1.0, (1.0, 0.0)),
    (1.0, 1.0, (0.0, 6.0)),
    (0.5, 1.0, (0.5, 3.0)),
    (0.5, 2.0, (0.75, 1.5)),
])
def test_scalar_examples_exact(sa, alpha, expected):
    pair = compute_scalars(sa, ScalarSchedulerConfig(alpha=alpha))
    assert (pair.lambda1, pair.lambda2) == expected


def test_scalar_identity_on_random_pairs():
    rng = np.random.default_rng(7)
    for sa, alpha in zip(rng.uniform(0, 1, 1000), rng.uniform(0.05, 5, 1000)):
        pair = compute_scalars(float(sa), ScalarSchedulerConfig(alpha=float(alpha)))
        assert abs(pair.lambda1 + pair.lambda2 / 6 - 1) < 1e-12


@settings(max_examples=200, deadline=None)
@given(a=st.floats(0, 1), b=st.floats(0, 1), alpha=st.floats(0.05, 10))
def test_scalars_monotone_in_accuracy(a, b, alpha):
    lo, hi = sorted((a, b))
    cfg = ScalarSchedulerConfig(alpha=alpha)
    p, q = compute_scalars(lo, cfg), compute_scalars(hi, cfg)
    assert q.lambda1 <= p.lambda1 and q.lambda2 >= p.lambda2


def test_scalar_errors():
    with pytest.raises(ValueError):
        compute_scalars(1.2)
    with pytest.raises(ValueError):
        ScalarSchedulerConfig(alpha=0.0)
    with pytest.raises(ValueError):
        ScalarSchedulerConfig(sa_subsample=1.5)
