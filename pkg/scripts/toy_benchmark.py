"""Run the seeded blobs->rings benchmark and print per-seed results and medians.

    python3 scripts/toy_benchmark.py                      # the acceptance configuration
    python3 scripts/toy_benchmark.py --target-n 4000 --methods vanilla,twins,autolora
"""
import argparse
import dataclasses
import json
import logging

from autolora.benchmark import DEFAULT_SEEDS, ToyBenchmark, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--methods", default="vanilla,autolora")
    ap.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)))
    ap.add_argument("--target-kind", default=ToyBenchmark.target_kind)
    ap.add_argument("--target-classes", type=int, default=ToyBenchmark.target_classes)
    ap.add_argument("--target-n", type=int, default=ToyBenchmark.target_n)
    ap.add_argument("--noise", type=float, default=ToyBenchmark.noise)
    ap.add_argument("--epochs", type=int, default=ToyBenchmark.epochs)
    ap.add_argument("--vanilla-beta", type=float, default=ToyBenchmark.vanilla_beta)
    ap.add_argument("--json-out", help="also write the per-seed summaries here")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    bench = ToyBenchmark(target_kind=args.target_kind, target_classes=args.target_classes,
                         target_n=args.target_n, noise=args.noise, epochs=args.epochs,
                         vanilla_beta=args.vanilla_beta)
    methods = tuple(args.methods.split(","))
    report = run_benchmark(bench, methods, tuple(int(s) for s in args.seeds.split(",")))
    print(report.table())
    for m in methods:
        print(f"median best_ra_val {m:<9} {report.median_best_ra(m):.4f}")

    if args.json_out:
        rows = [dict(seed=o.seed, method=o.method, test_sa=o.test_sa, test_ra=o.test_ra,
                     seconds=o.seconds, gs=o.gs_curve, **o.result.summary()) for o in report.outcomes]
        with open(args.json_out, "w") as fh:
            json.dump({"benchmark": dataclasses.asdict(bench), "runs": rows}, fh, indent=2, default=str)


if __name__ == "__main__":
    main()
