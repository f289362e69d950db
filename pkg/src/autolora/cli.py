"""Command-line interface: ``pretrain``, ``finetune``, ``eval`` and ``gs-probe``.

Configuration is layered: built-in defaults, then a TOML (or manifest JSON)
file given by ``--config``, then command-line flags.  Every run directory gets
a ``manifest.json`` holding the fully resolved configuration in the same
section layout, so ``finetune --config run/seed0/manifest.json`` repeats a run.

Exit codes: 0 success, 2 usage or configuration error, 3 non-finite loss.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .attack import AttackConfig
from .data import Dataset, SplitSpec, load_csv, make_synthetic, split
from .nn import ConfigurationError, FormatError, LoRaConfig, ModelSpec, load_checkpoint, save_checkpoint
from .objectives import TwinsConfig
from .schedulers import LrSchedulerConfig, ScalarSchedulerConfig
from .trainer import (METHODS, NonFiniteLossError, TrainConfig, evaluate, pretrain, run,
                      write_log_csv)

EXIT_USAGE = 2
EXIT_NUMERIC = 3

_NUM = (int, float)
SCHEMA: dict[str, dict[str, tuple]] = {
    "data": {"kind": (str,), "n": (int,), "d": (int,), "z": (int,), "margin": _NUM, "noise": _NUM,
             "seed": (int,), "csv": (str,), "header": (bool,), "val_fraction": _NUM,
             "test_fraction": _NUM, "split_seed": (int,)},
    "model": {"hidden_dims": (list,), "use_batchnorm": (bool,)},
    "pretrain": {"epochs": (int,), "lr": _NUM, "batch_size": (int,), "weight_decay": _NUM,
                 "adversarial": (bool,), "eps": _NUM, "step_size": _NUM, "steps": (int,),
                 "seed": (int,)},
    "method": {"name": (str,), "pretrained": (str,), "beta": _NUM, "gamma": _NUM, "rank": (int,),
               "init_std": _NUM, "alpha": _NUM, "kl_teacher_grad": (bool,), "kl_direction": (str,),
               "epochs": (int,), "batch_size": (int,), "weight_decay": _NUM, "lr": _NUM,
               "momentum": _NUM, "use_lr_scheduler": (bool,)},
    "attack": {"eps": _NUM, "step_size": _NUM, "steps": (int,), "random_start": (bool,)},
    "scheduler": {"eta0": _NUM, "checkpoint_interval": (int,), "halving_factor": _NUM,
                  "min_eta": _NUM, "cond1_fraction": _NUM, "cond1_mode": (str,)},
}

_TARGET_DATA = {"kind": "rings", "n": 8000, "d": 8, "z": 2, "margin": 1.0, "noise": 0.1, "seed": 0,
                "header": False, "val_fraction": 0.05, "test_fraction": 0.2, "split_seed": 0}
DEFAULTS = {
    "pretrain": {
        "data": {**_TARGET_DATA, "kind": "blobs", "n": 4000, "z": 4, "seed": 1000,
                 "val_fraction": 0.0, "test_fraction": 0.0},
        "model": {"hidden_dims": [64, 64], "use_batchnorm": True},
        "pretrain": {"epochs": 20, "lr": 0.05, "batch_size": 128, "weight_decay": 1e-4,
                     "adversarial": False, "eps": 4 / 255, "steps": 10, "seed": 0},
    },
    "finetune": {
        "data": dict(_TARGET_DATA),
        "method": {"name": "autolora", "epochs": 60, "batch_size": 128, "weight_decay": 1e-4,
                   "lr": 0.01, "momentum": 0.0, "gamma": 1.0, "rank": 8, "init_std": 0.01,
                   "alpha": 1.0, "kl_teacher_grad": False, "kl_direction": "nat_adv"},
        "attack": {"eps": 8 / 255, "steps": 10, "random_start": False},
        "scheduler": asdict(LrSchedulerConfig()),
    },
    "eval": {
        "data": dict(_TARGET_DATA),
        "attack": {"eps": 8 / 255, "steps": 10, "random_start": False},
    },
}
DEFAULTS["gs-probe"] = DEFAULTS["finetune"]


class ConfigError(ValueError):
    """A configuration file or flag combination is invalid; the message names the key."""


# --------------------------------------------------------------------------- config


def read_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_bytes()
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
            raw = raw.get("config", raw)   # a manifest carries its config under "config"
        else:
            raw = tomllib.loads(text.decode("utf-8"))
    except (tomllib.TOMLDecodeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from None
    return validate_sections(raw, str(path))


def validate_sections(raw: dict, origin: str = "config") -> dict:
    out = {}
    for section, values in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: [{section}] must be a table")
        out[section] = {}
        for key, value in values.items():
            where = f"{origin}: {section}.{key}"
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where}: unknown key")
            types = SCHEMA[section][key]
            if value is not None and (not isinstance(value, types) or
                                      (isinstance(value, bool) and bool not in types)):
                names = "/".join(t.__name__ for t in types)
                raise ConfigError(f"{where}: expected {names}, got {value!r}")
            out[section][key] = value
    return out


def merge(*layers: dict) -> dict:
    result: dict = {}
    for layer in layers:
        for section, values in layer.items():
            result.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    return result


def resolve(command: str, args: argparse.Namespace, flags: dict) -> dict:
    file_cfg = read_config(args.config) if getattr(args, "config", None) else {}
    cfg = merge(copy.deepcopy(DEFAULTS[command]), file_cfg, validate_sections(flags, "flag"))
    for section in ("attack", "pretrain"):
        if "eps" in cfg.get(section, {}):
            cfg[section].setdefault("step_size", default_step(cfg[section]["eps"]))
    return cfg


def default_step(eps: float) -> float:
    """A quarter of the budget (2/255 for 8/255); any positive step for the empty ball."""
    return eps / 4 if eps > 0 else 1 / 255


def _dataset(cfg: dict) -> Dataset:
    d = cfg["data"]
    try:
        if d.get("csv"):
            return load_csv(d["csv"], d["d"], d["z"], header=d.get("header", False))
        return make_synthetic(d["kind"], d["n"], d["d"], d["z"], d["margin"], d["noise"], d["seed"])
    except (ValueError, OSError) as exc:   # FormatError and bad labels are ValueErrors
        raise ConfigError(f"data: {exc}") from None


def _splits(cfg: dict) -> tuple[Dataset, Dataset, Dataset]:
    d = cfg["data"]
    try:
        spec = SplitSpec(d["val_fraction"], d["test_fraction"], d["split_seed"])
    except ConfigurationError as exc:
        raise ConfigError(f"data: {exc}") from None
    return split(_dataset(cfg), spec)


def _attack(section: dict) -> AttackConfig:
    cfg = AttackConfig(section["eps"], section["step_size"], section.get("steps", 10),
                       section.get("random_start", False))
    try:
        cfg.validate()
    except ConfigurationError as exc:
        raise ConfigError(f"attack: {exc}") from None
    return cfg


def train_config(cfg: dict, seed: int) -> TrainConfig:
    m, s = cfg["method"], cfg["scheduler"]
    attack = _attack(cfg["attack"])
    try:
        return TrainConfig(
            method=m["name"], max_epochs=m["epochs"], batch_size=m["batch_size"],
            weight_decay=m["weight_decay"], attack=attack, eval_attack=attack, beta=m.get("beta"),
            twins=TwinsConfig(m.get("beta") or 1.0, m["gamma"]),
            lora=LoRaConfig(m["rank"], m["init_std"]),
            scalars=ScalarSchedulerConfig(alpha=m["alpha"]),
            lr_scheduler=LrSchedulerConfig(**s),
            lr=m["lr"], momentum=m["momentum"], use_lr_scheduler=m.get("use_lr_scheduler"),
            kl_teacher_grad=m["kl_teacher_grad"], kl_direction=m["kl_direction"], seed=seed)
    except (ConfigurationError, ValueError) as exc:
        raise ConfigError(f"method: {exc}") from None


# --------------------------------------------------------------------------- artifacts


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, cfg: dict, seed: int | None, inputs: dict,
                   outputs: dict) -> None:
    manifest = {
        "tool": "autolora", "version": __version__, "command": command, "seed": seed,
        "config": cfg, "inputs": inputs, "outputs": outputs,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_params(path: str):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    try:
        return load_checkpoint(p.read_bytes())
    except FormatError as exc:
        raise ConfigError(f"{p}: {exc}") from None


# --------------------------------------------------------------------------- commands


def cmd_pretrain(args) -> int:
    flags = {"pretrain": {"adversarial": True if args.adversarial else None, "eps": args.eps,
                          "epochs": args.epochs, "seed": args.seed}}
    cfg = resolve("pretrain", args, flags)
    ds = _dataset(cfg)
    m, p = cfg["model"], cfg["pretrain"]
    try:
        spec = ModelSpec(ds.dim, tuple(m["hidden_dims"]), ds.num_classes, m["use_batchnorm"])
    except ConfigurationError as exc:
        raise ConfigError(f"model: {exc}") from None
    attack = _attack(p)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = out.with_suffix(".manifest.json")
    inputs = {"dataset": ds.checksum()}
    write_manifest(manifest, "pretrain", cfg, p["seed"], inputs, {"checkpoint": str(out)})
    params = pretrain(spec, ds, p["epochs"], adversarial=p["adversarial"], attack=attack, lr=p["lr"],
                      batch_size=p["batch_size"], weight_decay=p["weight_decay"], seed=p["seed"])
    out.write_bytes(save_checkpoint(params))
    write_manifest(manifest, "pretrain", cfg, p["seed"], inputs,
                   {"checkpoint": str(out), "checkpoint_sha256": sha256_file(out)})
    print(f"wrote {out} and {manifest}")
    return 0


def _finetune_flags(args) -> dict:
    return {
        "method": {"name": args.method, "pretrained": args.pretrained, "beta": args.beta,
                   "gamma": args.gamma, "epochs": args.epochs, "rank": args.rank,
                   "kl_teacher_grad": True if args.kl_teacher_grad else None},
        "attack": {"eps": args.eps},
        "scheduler": {"cond1_mode": args.cond1_mode},
    }


def _prepare_finetune(command: str, args, parser) -> tuple[dict, list[int]]:
    cfg = resolve(command, args, _finetune_flags(args))
    m = cfg["method"]
    if m["name"] not in METHODS:
        raise ConfigError(f"method.name: expected one of {METHODS}, got {m['name']!r}")
    if m["name"] == "vanilla" and m.get("beta") is None:
        parser.error("--beta is required for --method vanilla")
    if not m.get("pretrained"):
        parser.error("--pretrained is required (or method.pretrained in the config)")
    try:
        seeds = [int(s) for s in str(args.seed).split(",") if s.strip()]
    except ValueError:
        seeds = []
    if not seeds:
        parser.error(f"--seed expects comma-separated integers, got {args.seed!r}")
    return cfg, seeds


def _run_seed(cfg: dict, seed: int, out_dir: Path, pre, splits, pre_sha: str) -> dict:
    train, val, test = splits
    tc = train_config(cfg, seed)
    seed_dir = out_dir / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    outputs = {k: str(seed_dir / f) for k, f in
               (("log", "log.csv"), ("summary", "summary.json"), ("checkpoint", "best.ckpt"))}
    inputs = {"pretrained": cfg["method"]["pretrained"], "pretrained_sha256": pre_sha,
              "train": train.checksum(), "val": val.checksum(), "test": test.checksum()}
    write_manifest(seed_dir / "manifest.json", "finetune", cfg, seed, inputs, outputs)
    try:
        result = run(tc, pre, train, val)
    except NonFiniteLossError as exc:
        (seed_dir / "log.csv").write_text(write_log_csv(exc.rows))
        raise
    (seed_dir / "log.csv").write_text(write_log_csv(result.rows))
    (seed_dir / "best.ckpt").write_bytes(save_checkpoint(result.best_params))
    sa, ra = evaluate(result.best_params, test, tc.eval_attack) if len(test) else (None, None)
    summary = result.summary() | {"seed": seed, "method": tc.method, "test_sa": sa, "test_ra": ra}
    (seed_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_finetune(args, parser) -> int:
    cfg, seeds = _prepare_finetune("finetune", args, parser)
    pre_path = cfg["method"]["pretrained"]
    pre = _load_params(pre_path)
    splits = _splits(cfg)
    if splits[0].dim != pre.spec.input_dim:
        raise ConfigError(f"data.d: pretrained extractor expects d={pre.spec.input_dim}, "
                          f"data has d={splits[0].dim}")
    try:  # fail fast before any training starts
        train_config(cfg, seeds[0]).lora.validate(pre.spec)
    except ConfigurationError as exc:
        raise ConfigError(f"method.rank: {exc}") from None
    out_dir = Path(args.out_dir)
    pre_sha = sha256_file(pre_path)
    workers = max(1, min(len(seeds), int(os.environ.get("AUTOLORA_THREADS", "1") or 1)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_seed, cfg, s, out_dir, pre, splits, pre_sha) for s in seeds]
        summaries = [f.result() for f in futures]
    for s in summaries:
        print(f"seed {s['seed']}: best ra_val {s['best_ra_val']:.4f} at epoch {s['best_epoch']}, "
              f"test sa {s['test_sa']}, test ra {s['test_ra']}")
    return 0


def cmd_eval(args) -> int:
    cfg = resolve("eval", args, {"attack": {"eps": args.eps, "steps": args.steps,
                                            "step_size": args.step_size}})
    params = _load_params(args.checkpoint)
    parts = dict(zip(("train", "val", "test"), _splits(cfg)))
    ds = _dataset(cfg) if args.split == "all" else parts[args.split]
    attack = _attack(cfg["attack"])
    sa, ra = evaluate(params, ds, attack)
    report = {"sa": sa, "ra": ra, "eps": attack.epsilon, "steps": attack.steps, "n": len(ds)}
    print(f"SA {sa:.4f}  RA {ra:.4f}  (eps={attack.epsilon:.6g}, steps={attack.steps}, n={len(ds)})")
    print(json.dumps(report))
    if args.json_out:
        Path(args.json_out).write_text(json.dumps(report, indent=2) + "\n")
    return 0


def cmd_gs_probe(args, parser) -> int:
    cfg, seeds = _prepare_finetune("gs-probe", args, parser)
    pre = _load_params(cfg["method"]["pretrained"])
    train, val, _ = _splits(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["seed,epoch,gs,sa_val,ra_val"]
    for seed in seeds:
        result = run(train_config(cfg, seed), pre, train, val)
        for r in result.rows:
            gs = "" if r.gs is None else repr(r.gs)
            lines.append(f"{seed},{r.epoch},{gs},{r.sa_val!r},{r.ra_val!r}")
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out} ({len(lines) - 1} rows)")
    return 0


# --------------------------------------------------------------------------- parser


def _finetune_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config or a manifest.json from an earlier run")
    p.add_argument("--pretrained", help="pretrained checkpoint (overrides method.pretrained)")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--beta", type=float, help="KL weight; required for vanilla")
    p.add_argument("--gamma", type=float, help="TWINS adaptive-branch weight")
    p.add_argument("--epochs", type=int)
    p.add_argument("--rank", type=int, help="LoRA rank (AutoLoRa)")
    p.add_argument("--eps", type=float, help="training and validation PGD budget")
    p.add_argument("--seed", default="0", help="comma-separated run seeds, e.g. 0,6,66")
    p.add_argument("--kl-teacher-grad", action="store_true",
                   help="let the KL term differentiate through the LoRA soft labels")
    p.add_argument("--cond1-mode", choices=("paper", "improvement"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autolora", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a feature extractor on a source task")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path; the manifest goes next to it")
    p.add_argument("--adversarial", action="store_true")
    p.add_argument("--eps", type=float, help="pretraining PGD budget")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("finetune", help="robust fine-tuning with vanilla RFT, TWINS or AutoLoRa")
    _finetune_args(p)
    p.add_argument("--out-dir", default="runs/finetune")

    p = sub.add_parser("eval", help="standard and PGD robust accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="config whose [data] section names the dataset")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--eps", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float, help="default: eps/4")
    p.add_argument("--json-out")

    p = sub.add_parser("gs-probe", help="per-epoch gradient similarity and robust accuracy")
    _finetune_args(p)
    p.add_argument("--out", default="gs.csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        if args.command == "pretrain":
            return cmd_pretrain(args)
        if args.command == "finetune":
            return cmd_finetune(args, sub)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_gs_probe(args, sub)
    except (ConfigError, ConfigurationError) as exc:
        print(f"autolora {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"autolora {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
