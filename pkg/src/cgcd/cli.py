"""Command-line entry point: synthetic data generation, split construction,
experiment runs, and checkpoint evaluation.

The config file is the single source of truth; --set key=value flags override
individual dotted paths and --seed overrides every seed at once. Exit codes:
0 ok, 2 config error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data_io import (
    StagePlan,
    build_cgcd_splits,
    generate_synthetic_benchmark,
    read_embeddings,
    write_embeddings,
)
from .evaluation import hungarian_accuracy
from .model import predict_labels
from .pipeline import load_checkpoint, run_experiment
from .types import HyperParams, RunModes
from .validation import ConfigError, DataError

logger = logging.getLogger("cgcd")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

SYNTHETIC_DEFAULTS = {
    "k_total": 40,
    "d": 32,
    "samples_per_class": 440,
    "angular_margin_deg": 60.0,
    "noise_scale": 0.15,
}
PLAN_DEFAULTS = {
    "k_init": 20,
    "t_total": 5,
    "k_new": 4,
    "samples_per_new": 200,
    "samples_per_old": 25,
    "test_fraction": 0.2,
}
TOP_LEVEL_KEYS = {"seed", "hyper", "modes", "plan", "synthetic"}


def _setup_logging() -> None:
    level = os.environ.get("CGCD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except ImportError:  # worker caps are best-effort; results never depend on them
        logger.warning("threadpoolctl unavailable; --threads ignored")


def _parse_scalar(text: str):
    lowered = text.lower()
    if lowered in ("true", "on", "yes"):
        return True
    if lowered in ("false", "off", "no"):
        return False
    if lowered in ("null", "none"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if text.startswith("["):
        return json.loads(text)
    return text


def load_config(path: str | None, overrides: list[str], seed: int | None) -> dict:
    """Merge defaults, the config file, --set overrides, and --seed."""
    config: dict = {"seed": 0, "hyper": {}, "modes": {}, "plan": {}, "synthetic": {}}
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config root must be a JSON object")
        unknown = set(loaded) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in TOP_LEVEL_KEYS - {"seed"}:
            section = loaded.get(key, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            config[key].update(section)
        if "seed" in loaded:
            config["seed"] = loaded["seed"]
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        target = config
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ConfigError(f"unknown config path {key!r}")
            target = target[part]
        target[parts[-1]] = _parse_scalar(value)
    if seed is not None:
        config["seed"] = seed
    _validate_sections(config)
    return config


def _validate_sections(config: dict) -> None:
    if not isinstance(config["seed"], int):
        raise ConfigError("seed must be an integer")
    unknown = set(config["hyper"]) - set(HyperParams.field_names())
    if unknown:
        raise ConfigError(f"unknown hyper keys: {sorted(unknown)}")
    unknown = set(config["modes"]) - set(RunModes.field_names())
    if unknown:
        raise ConfigError(f"unknown modes keys: {sorted(unknown)}")
    plan_keys = {"k_init", "t_total", "k_new", "samples_per_new", "samples_per_old", "test_fraction"}
    unknown = set(config["plan"]) - plan_keys
    if unknown:
        raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
    unknown = set(config["synthetic"]) - set(SYNTHETIC_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")


def resolve_hyper(config: dict) -> HyperParams:
    try:
        return HyperParams(seed=config["seed"], **{
            k: v for k, v in config["hyper"].items() if k != "seed"
        })
    except TypeError as exc:
        raise ConfigError(str(exc))


def resolve_modes(config: dict) -> RunModes:
    modes = dict(config["modes"])
    if isinstance(modes.get("gt_ratios"), list):
        modes["gt_ratios"] = tuple(modes["gt_ratios"])
    if isinstance(modes.get("estimate_k_range"), list):
        modes["estimate_k_range"] = tuple(modes["estimate_k_range"])
    try:
        return RunModes(**modes)
    except TypeError as exc:
        raise ConfigError(str(exc))


def resolve_plan(config: dict) -> StagePlan:
    plan = {**PLAN_DEFAULTS, **config["plan"]}
    k_new = plan["k_new"]
    if isinstance(k_new, list):
        k_new = tuple(k_new)
    try:
        return StagePlan(
            k_init=plan["k_init"],
            t_total=plan["t_total"],
            k_new=k_new,
            samples_per_new=plan["samples_per_new"],
            samples_per_old=plan["samples_per_old"],
            seed=config["seed"],
            test_fraction=plan["test_fraction"],
        )
    except TypeError as exc:
        raise ConfigError(str(exc))


def cmd_gen_synthetic(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    params = {**SYNTHETIC_DEFAULTS, **config["synthetic"]}
    features = generate_synthetic_benchmark(
        k_total=params["k_total"],
        d=params["d"],
        samples_per_class=params["samples_per_class"],
        angular_margin_deg=params["angular_margin_deg"],
        noise_scale=params["noise_scale"],
        seed=config["seed"],
    )
    write_embeddings(args.out, features)
    print(f"wrote {features.n} x {features.dim} embeddings to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    plan = resolve_plan(config)
    source = read_embeddings(args.embeddings)
    result = build_cgcd_splits(source, plan)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "plan": {
            "k_init": plan.k_init,
            "t_total": plan.t_total,
            "k_new": list(plan.k_new),
            "samples_per_new": plan.samples_per_new,
            "samples_per_old": plan.samples_per_old,
            "test_fraction": plan.test_fraction,
            "seed": plan.seed,
        },
        "class_mapping": {str(k): v for k, v in sorted(result.class_mapping.items())},
        "stages": [],
    }
    for stage, (train, test) in enumerate(zip(result.train, result.test)):
        train_path = out / f"stage_{stage}_train.cge1"
        test_path = out / f"stage_{stage}_test.cge1"
        write_embeddings(train_path, train)
        write_embeddings(test_path, test)
        manifest["stages"].append(
            {
                "stage": stage,
                "train": train_path.name,
                "train_samples": train.n,
                "test": test_path.name,
                "test_samples": test.n,
            }
        )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {2 * len(result.train)} stage files to {out}")
    return EXIT_OK


def _apply_ablations(config: dict, ablations: list[str]) -> None:
    known = {
        "entropy_reg": "entropy_reg",
        "hardness": "hardness_sampling",
        "hardness_sampling": "hardness_sampling",
        "kd": "knowledge_distillation",
        "knowledge_distillation": "knowledge_distillation",
        "replay": "replay",
        "prior_reg": "prior_reg",
    }
    for item in ablations or []:
        if "=" not in item:
            raise ConfigError(f"--ablate expects name=on|off, got {item!r}")
        name, value = item.split("=", 1)
        if name not in known:
            raise ConfigError(f"unknown ablation {name!r}; choices: {sorted(known)}")
        config["modes"][known[name]] = _parse_scalar(value)


def _load_stage_files(stage_dir: Path, t_total: int):
    manifest_path = stage_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing manifest.json in {stage_dir}")
    manifest = json.loads(manifest_path.read_text())
    stages = manifest["stages"]
    if len(stages) != t_total + 1:
        raise DataError(
            f"stage directory has {len(stages)} stages but the plan expects {t_total + 1}"
        )
    train_sets, test_sets = [], []
    for entry in stages:
        train_sets.append(read_embeddings(stage_dir / entry["train"]))
        test_sets.append(read_embeddings(stage_dir / entry["test"]))
    return train_sets, test_sets


def cmd_run(args) -> int:
    config = load_config(args.config, args.set, args.seed)
    _apply_ablations(config, args.ablate)
    hyper = resolve_hyper(config)
    modes = resolve_modes(config)
    plan = resolve_plan(config)
    train_sets, test_sets = _load_stage_files(Path(args.stages), plan.t_total)
    state, report = run_experiment(
        plan,
        train_sets,
        test_sets,
        hyper,
        modes,
        out_dir=args.out,
        config_echo=config,
        resume_from=args.resume,
    )
    final = report["stages"][-1]
    print(
        f"run complete: final stage {final['stage']} "
        f"all={final['all']:.2f} old={final['old']:.2f} "
        f"new={'-' if final['new'] is None else format(final['new'], '.2f')}"
    )
    print(f"report written to {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    test = read_embeddings(args.test)
    if test.labels is None:
        raise DataError("label file missing: the test embeddings carry no labels")
    k = state.label_space.k_total
    if int(test.labels.max()) >= k:
        raise DataError(
            f"k mismatch: checkpoint has {k} classes but labels reach "
            f"{int(test.labels.max())}"
        )
    preds = predict_labels(state.model, test.data)
    ev = hungarian_accuracy(test.labels, preds, state.label_space)
    payload = json.dumps(ev.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(payload)
        print(f"wrote evaluation to {args.out}")
    else:
        print(payload, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cgcd",
        description="Continual generalized category discovery over feature embeddings.",
    )
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON run config (defaults used if omitted)")
    common.add_argument("--seed", type=int, default=None, help="override every seed")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a dotted config path, e.g. hyper.tau_p=0.2",
    )

    p = sub.add_parser("gen-synthetic", parents=[common], help="generate a synthetic benchmark")
    p.add_argument("--out", required=True, help="output CGE1 embedding file")
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("split", parents=[common], help="build per-stage train/test splits")
    p.add_argument("--embeddings", required=True, help="labeled CGE1 source file")
    p.add_argument("--out", required=True, help="output stage directory")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("run", parents=[common], help="run the full experiment")
    p.add_argument("--stages", required=True, help="stage directory from `split`")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", default=None, help="resume from a stage checkpoint")
    p.add_argument(
        "--ablate",
        action="append",
        default=[],
        metavar="NAME=on|off",
        help="toggle a component, e.g. entropy_reg=off",
    )
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on test embeddings")
    p.add_argument("--checkpoint", required=True, help="CGRS checkpoint file")
    p.add_argument("--test", required=True, help="labeled CGE1 test file")
    p.add_argument("--out", default=None, help="write the StageEval JSON here")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # runtime failures keep a distinct exit code
        logger.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
