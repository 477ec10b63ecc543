"""Command-line entry point: ``frwreid {synth,train,finetune,eval,compare,verify}``.

Settings come from a flat ``key = value`` file (``--config``) overridden by
command-line flags.  Exit codes: 0 success, 1 validation error, 2 runtime or
numeric failure, 3 verification-suite failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path


from . import data as D
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DatasetError,
    DimensionError,
    FrwReidError,
    NumericError,
    ProtocolError,
)
from .evaluation import Protocol, evaluate_splits
from .losses import LossConfig
from .model import ModelConfig, atomic_write_bytes, build, load, save
from .training import LOSS_MODES, TrainPlan, compare_losses, train, two_step_finetune

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


def _bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default, help)
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0, "random seed for every stochastic step"),
    "out": (str, ".", "output directory"),
    # data
    "data": (str, "", "dataset directory holding manifest.txt"),
    "test_data": (str, "", "held-out dataset directory (eval/compare)"),
    "ids": (int, 50, "synthetic identities"),
    "cams": (int, 2, "synthetic camera views"),
    "shots": (int, 4, "synthetic images per identity and camera"),
    "augment": (_bool, True, "apply translation/flip augmentation to training data"),
    "translations": (int, 3, "translated copies per training image"),
    "max_shift": (float, 0.05, "largest translation as a fraction of each side"),
    "flip": (_bool, True, "add a mirrored copy of each training image"),
    # model
    "preset": (str, "desk", "network preset: desk or paper"),
    "frw": (_bool, True, "enable the feature reweighting layer"),
    "lrelu_slope": (float, 0.1, "leaky ReLU negative slope"),
    # training
    "loss_mode": (str, "IC", "IC, I or IV"),
    "iterations": (int, 25000, "training iterations"),
    "lr": (float, 0.001, "initial learning rate"),
    "lr_decay_step": (int, 22000, "iteration at which the learning rate drops"),
    "lr_decay_factor": (float, 0.1, "learning-rate multiplier after the drop"),
    "batch_size": (int, 100, "images per batch"),
    "weight_decay": (float, 0.001, "decoupled weight decay on weight matrices"),
    "lam": (float, 0.01, "center-loss weight"),
    "alpha": (float, 0.5, "center update rate"),
    "beta": (float, 0.001, "FRW norm-constraint weight"),
    "C": (float, 200.0, "FRW norm target"),
    "log_every": (int, 100, "log cadence in iterations"),
    # fine-tuning
    "checkpoint": (str, "", "model checkpoint path"),
    "phase1_iters": (int, 2000, "head-only iterations before joint fine-tuning"),
    "early_stop_window": (int, 200, "phase-1 early-stop window (0 disables)"),
    # evaluation
    "splits": (int, 10, "random evaluation splits"),
    "train_frac": (float, 0.0, "fraction of identities held back from each evaluation split"),
    "max_rank": (int, 20, "largest CMC rank reported"),
    "swap_views": (_bool, False, "use camera 1 as probe and camera 0 as gallery"),
    # comparison
    "budget": (int, 1000, "iterations per comparison arm"),
    "seeds": (int, 3, "seeds per comparison arm"),
    "modes": (str, "IC,IV", "comma-separated loss modes to compare"),
}

COMMAND_KEYS = {
    "synth": ("ids", "cams", "shots"),
    "train": ("data", "augment", "translations", "max_shift", "flip", "preset", "frw", "lrelu_slope", "loss_mode",
              "iterations", "lr", "lr_decay_step", "lr_decay_factor", "batch_size", "weight_decay", "lam",
              "alpha", "beta", "C", "log_every"),
    "finetune": ("checkpoint", "data", "augment", "translations", "max_shift", "flip", "loss_mode", "phase1_iters",
                 "early_stop_window", "iterations", "lr", "lr_decay_step", "lr_decay_factor", "batch_size",
                 "weight_decay", "lam", "alpha", "beta", "C", "log_every"),
    "eval": ("checkpoint", "data", "splits", "train_frac", "max_rank", "swap_views"),
    "compare": ("data", "test_data", "ids", "cams", "shots", "augment", "preset", "frw", "budget", "seeds",
                "modes", "lr", "batch_size", "weight_decay", "lam", "alpha", "beta", "C", "splits", "max_rank"),
    "verify": (),
}


class ArgumentError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports problems through exceptions so they map onto exit codes."""

    def error(self, message):
        raise ArgumentError(message)


def read_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    problems = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{path}:{lineno}: expected 'key = value'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            problems.append(f"{path}:{lineno}: unknown key {key!r}")
            continue
        values[key] = value
    if problems:
        raise ConfigError("\n".join(problems))
    return values


def resolve(command: str, file_values: dict[str, str], flag_values: dict[str, object]) -> dict[str, object]:
    """Defaults, then the config file, then flags.  Every problem is collected
    before raising."""
    resolved, problems = {}, []
    for key, (parse, default, _) in SCHEMA.items():
        raw = flag_values.get(key)
        if raw is None:
            raw = file_values.get(key)
        if raw is None:
            resolved[key] = default
            continue
        try:
            resolved[key] = parse(raw) if isinstance(raw, str) or parse is not _bool else bool(raw)
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if not problems:
        problems = _validate(command, resolved)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    return resolved


def _validate(command: str, cfg: dict) -> list[str]:
    problems = []
    if command in ("synth", "compare") and cfg["ids"] < 2:
        problems.append(f"ids must be at least 2, got {cfg['ids']}")
    if command == "synth":
        if cfg["cams"] < 2:
            problems.append(f"cams must be at least 2, got {cfg['cams']}")
        if cfg["shots"] < 1:
            problems.append(f"shots must be at least 1, got {cfg['shots']}")
    if cfg["loss_mode"] not in LOSS_MODES:
        problems.append(f"loss_mode must be one of {LOSS_MODES}, got {cfg['loss_mode']!r}")
    modes = [m.strip() for m in cfg["modes"].split(",") if m.strip()]
    if command == "compare" and (len(modes) < 2 or any(m not in LOSS_MODES for m in modes)):
        problems.append(f"modes must list two or more of {LOSS_MODES}, got {cfg['modes']!r}")
    if command == "compare" and cfg["seeds"] < 3:
        problems.append("compare needs at least 3 seeds")
    if cfg["preset"] not in ("desk", "paper"):
        problems.append(f"preset must be desk or paper, got {cfg['preset']!r}")
    for key in ("iterations", "phase1_iters", "budget", "early_stop_window"):
        if cfg[key] < 0:
            problems.append(f"{key} must be non-negative")
    if cfg["batch_size"] < 2:
        problems.append("batch_size must be at least 2")
    if cfg["splits"] < 1 or cfg["max_rank"] < 1:
        problems.append("splits and max_rank must be positive")
    if not 0 <= cfg["max_shift"] < 0.5:
        problems.append("max_shift must lie in [0, 0.5)")
    if command in ("train", "finetune", "eval") and not cfg["data"]:
        problems.append("data: a dataset directory is required")
    if command in ("finetune", "eval") and not cfg["checkpoint"]:
        problems.append("checkpoint: a checkpoint path is required")
    for key in ("data", "test_data", "checkpoint"):
        if cfg[key] and command in COMMAND_KEYS and key in COMMAND_KEYS[command] and not Path(cfg[key]).exists():
            problems.append(f"{key}: {cfg[key]} does not exist")
    return problems


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in cfg.items())


def write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _loss(cfg) -> LossConfig:
    return LossConfig(lam=cfg["lam"], beta=cfg["beta"], C=cfg["C"])


def _plan(cfg, iterations: int) -> TrainPlan:
    return TrainPlan(iterations=iterations, lr=cfg["lr"], lr_decay_step=cfg["lr_decay_step"],
                     lr_decay_factor=cfg["lr_decay_factor"], batch_size=cfg["batch_size"],
                     weight_decay=cfg["weight_decay"], loss=_loss(cfg), alpha=cfg["alpha"], mode=cfg["loss_mode"],
                     seed=cfg["seed"], log_every=cfg["log_every"])


def _augment_cfg(cfg) -> D.AugmentConfig | None:
    if not cfg["augment"]:
        return None
    return D.AugmentConfig(cfg["translations"], (cfg["max_shift"], cfg["max_shift"]), cfg["flip"])


def _training_set(cfg, input_size) -> D.ReidDataset:
    ds = D.load_directory(cfg["data"])
    aug = _augment_cfg(cfg)
    if aug is not None:
        ds = D.augment(ds, aug, cfg["seed"])
    return D.preprocess(ds, input_size)


# ----------------------------------------------------------------------------
# commands


def cmd_synth(cfg) -> int:
    ds = D.generate_synthetic(cfg["ids"], cfg["cams"], cfg["shots"], seed=cfg["seed"])
    manifest = D.export_directory(ds, _out_dir(cfg))
    print(f"wrote {len(ds)} images ({ds.num_ids} identities x {ds.num_cams} cameras x {cfg['shots']} shots) "
          f"and {manifest}")
    return EXIT_OK


def cmd_train(cfg) -> int:
    out = _out_dir(cfg)
    mcfg = ModelConfig.from_preset(cfg["preset"], frw_enabled=cfg["frw"], lrelu_slope=cfg["lrelu_slope"])
    ds = _training_set(cfg, mcfg.input_size)
    mcfg = replace(mcfg, num_classes=ds.num_ids, input_mean=tuple(ds.mean))
    model = build(mcfg, cfg["seed"])
    model, log = train(model, ds, _plan(cfg, cfg["iterations"]))
    save(model, out / "model.ckpt")
    write_text(out / "train_log.csv", log.to_csv())
    last = log.records[-1] if log.records else {}
    print(f"trained {cfg['iterations']} iterations; final L = {last.get('L', float('nan')):.4f}; "
          f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_finetune(cfg) -> int:
    out = _out_dir(cfg)
    model = load(cfg["checkpoint"])
    ds = _training_set(cfg, model.cfg.input_size)
    plan1 = replace(_plan(cfg, cfg["phase1_iters"]), early_stop_window=cfg["early_stop_window"])
    plan2 = _plan(cfg, cfg["iterations"])
    model, log, sums = two_step_finetune(model, ds, plan1, plan2)
    model.cfg = replace(model.cfg, input_mean=tuple(ds.mean))
    print(f"frozen-parameter checksum before phase 1: {sums['before_phase1']}")
    print(f"frozen-parameter checksum after phase 1:  {sums['after_phase1']}")
    save(model, out / "model.ckpt")
    write_text(out / "finetune_log.csv", log.to_csv())
    print(f"fine-tuned on {ds.num_ids} identities; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    out = _out_dir(cfg)
    model = load(cfg["checkpoint"])
    ds = D.load_directory(cfg["data"])
    ds = D.preprocess(ds, model.cfg.input_size, mean=model.cfg.input_mean)
    protocol = Protocol(num_splits=cfg["splits"], train_frac=cfg["train_frac"], seed=cfg["seed"],
                        max_rank=cfg["max_rank"], swap_views=cfg["swap_views"])
    curve = evaluate_splits(model, ds, protocol)
    write_text(out / "cmc.csv", curve.to_csv())
    ranks = "  ".join(f"rank-{k}: {curve.rank(k):.4f}" for k in (1, 5, 10) if k <= len(curve.rates))
    print(f"{ranks}  ({curve.num_probes} probes, {cfg['splits']} splits)")
    return EXIT_OK


def cmd_compare(cfg) -> int:
    out = _out_dir(cfg)
    mcfg = ModelConfig.from_preset(cfg["preset"], frw_enabled=cfg["frw"])
    if cfg["data"]:
        train_ds = D.load_directory(cfg["data"])
        if cfg["test_data"]:
            test_ds = D.load_directory(cfg["test_data"])
        else:
            train_ds, test_ds = D.split_identities(train_ds, train_ds.num_ids // 2, cfg["seed"])
        aug = _augment_cfg(cfg)
        if aug is not None:
            train_ds = D.augment(train_ds, aug, cfg["seed"])
        train_ds = D.preprocess(train_ds, mcfg.input_size)
        test_ds = D.preprocess(test_ds, mcfg.input_size, mean=train_ds.mean)
    else:
        half = cfg["ids"] // 2
        bench = D.desk_benchmark(half, cfg["ids"] - half, cfg["cams"], cfg["shots"], mcfg.input_size, cfg["seed"],
                                 _augment_cfg(cfg), holdout_shots=0)
        train_ds, test_ds = bench.train, bench.test
    plan = _plan(cfg, cfg["budget"])
    plan = replace(plan, lr_decay_step=max(1, int(0.88 * cfg["budget"])), log_every=max(1, cfg["budget"]))
    modes = tuple(m.strip() for m in cfg["modes"].split(",") if m.strip())
    seeds = tuple(cfg["seed"] + k for k in range(cfg["seeds"]))
    protocol = Protocol(num_splits=cfg["splits"], seed=cfg["seed"], max_rank=cfg["max_rank"])
    report = compare_losses(train_ds, test_ds, mcfg, plan, modes, seeds, protocol)
    text = report.to_csv()
    write_text(out / "compare.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_verify(cfg) -> int:
    from .verify import run_all

    results = run_all()
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print("all suites passed" if not failed else f"failed suites: {', '.join(failed)}")
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval,
            "compare": cmd_compare, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    def add_globals(p, suppress):
        default = argparse.SUPPRESS if suppress else None
        p.add_argument("--config", default=default, help="key = value configuration file")
        p.add_argument("--seed", type=int, default=default, help=SCHEMA["seed"][2])
        p.add_argument("--out", default=default, help=SCHEMA["out"][2])

    parser = _Parser(prog="frwreid", description=__doc__.splitlines()[0])
    add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, keys in COMMAND_KEYS.items():
        p = sub.add_parser(name)
        add_globals(p, suppress=True)
        for key in keys:
            parse, _, help_text = SCHEMA[key]
            flag = "--" + key.replace("_", "-")
            if parse is _bool:
                p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=help_text)
            else:
                p.add_argument(flag, dest=key, type=str, default=None, help=help_text)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
        if args.command != "verify":
            write_text(_out_dir(cfg) / f"{args.command}_config.txt", format_config(cfg))
        print(f"# resolved configuration ({args.command})")
        print(format_config(cfg), end="")
        return COMMANDS[args.command](cfg)
    except (ConfigError, ContractError, DatasetError, DimensionError, ProtocolError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, FrwReidError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
