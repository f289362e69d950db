"""The seeded toy transfer benchmark: pretrain on blobs, fine-tune on rings.

One :class:`ToyBenchmark` pins every size, seed and budget so that the
scripts, the ``gs-probe`` command and the acceptance suite all run the same
task.  Each seed draws its own source task, pretrained extractor and target
split.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attack import AttackConfig
from .data import Dataset, SplitSpec, make_synthetic, split
from .nn import ModelSpec, ParamSet
from .trainer import RunResult, TrainConfig, evaluate, pretrain, run

DEFAULT_SEEDS = (0, 6, 66)


@dataclass(frozen=True)
class ToyBenchmark:
    input_dim: int = 8
    hidden_dims: tuple[int, ...] = (64, 64)
    source_kind: str = "blobs"
    source_classes: int = 4
    source_n: int = 4000
    pretrain_epochs: int = 20
    pretrain_attack: AttackConfig = AttackConfig(epsilon=4 / 255, step_size=1 / 255)
    target_kind: str = "rings"
    target_classes: int = 2
    target_n: int = 8000
    margin: float = 1.0
    noise: float = 0.1
    split: SplitSpec = SplitSpec(val_fraction=0.05, test_fraction=0.2)
    epochs: int = 30
    batch_size: int = 128
    vanilla_beta: float = 6.0

    def source(self, seed: int) -> Dataset:
        return make_synthetic(self.source_kind, self.source_n, self.input_dim, self.source_classes,
                              self.margin, self.noise, seed=1000 + seed)

    def target(self, seed: int) -> tuple[Dataset, Dataset, Dataset]:
        ds = make_synthetic(self.target_kind, self.target_n, self.input_dim, self.target_classes,
                            self.margin, self.noise, seed=seed)
        return split(ds, replace(self.split, seed=seed))

    def pretrained(self, seed: int) -> ParamSet:
        spec = ModelSpec(self.input_dim, self.hidden_dims, self.source_classes)
        return pretrain(spec, self.source(seed), self.pretrain_epochs, adversarial=True,
                        attack=self.pretrain_attack, seed=seed)

    def train_config(self, method: str, seed: int, **overrides) -> TrainConfig:
        kw = dict(method=method, max_epochs=self.epochs, batch_size=self.batch_size, seed=seed)
        if method == "vanilla":
            kw["beta"] = self.vanilla_beta
        return TrainConfig(**(kw | overrides))


@dataclass
class SeedOutcome:
    seed: int
    method: str
    result: RunResult
    test_sa: float
    test_ra: float
    seconds: float

    @property
    def gs_curve(self) -> list[float | None]:
        return [r.gs for r in self.result.rows]


@dataclass
class BenchmarkReport:
    outcomes: list[SeedOutcome] = field(default_factory=list)

    def by_method(self, method: str) -> list[SeedOutcome]:
        return [o for o in self.outcomes if o.method == method]

    def median_best_ra(self, method: str) -> float:
        return float(np.median([o.result.best_ra_val for o in self.by_method(method)]))

    def table(self) -> str:
        lines = [f"{'method':<9} {'seed':>4} {'best_ra_val':>11} {'best_ep':>7} {'test_sa':>7} "
                 f"{'test_ra':>7} {'halvings':>8} {'mean_gs':>7} {'sec':>6}"]
        for o in self.outcomes:
            gs = [g for g in o.gs_curve if g is not None]
            mean_gs = f"{np.mean(gs):.3f}" if gs else "-"
            lines.append(f"{o.method:<9} {o.seed:>4} {o.result.best_ra_val:>11.4f} "
                         f"{o.result.best_epoch:>7} {o.test_sa:>7.4f} {o.test_ra:>7.4f} "
                         f"{len(o.result.halve_log):>8} {mean_gs:>7} {o.seconds:>6.1f}")
        return "\n".join(lines)


def run_benchmark(bench: ToyBenchmark = ToyBenchmark(), methods=("vanilla", "autolora"),
                  seeds=DEFAULT_SEEDS, **overrides) -> BenchmarkReport:
    """Run every method on every seed; each seed shares one pretrained extractor across methods."""
    report = BenchmarkReport()
    for seed in seeds:
        pre = bench.pretrained(seed)
        train, val, test = bench.target(seed)
        for method in methods:
            t0 = time.perf_counter()
            cfg = bench.train_config(method, seed, **overrides)
            result = run(cfg, pre, train, val)
            sa, ra = evaluate(result.best_params, test, cfg.eval_attack)
            report.outcomes.append(SeedOutcome(seed, method, result, sa, ra, time.perf_counter() - t0))
    return report
