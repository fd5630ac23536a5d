"""Experiment driver: dataset generation, refinement, evaluation, transfer.

Every command reads a JSON config file and writes its outputs plus a plain
key=value manifest into the output directory.  Exit codes: 0 success,
2 config/validation error, 3 refinement did not converge, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
import warnings

import numpy as np

from .agents import AgentConfig, run_transfer_suite, write_curves_csv
from .approx import FitConfig, classifier_from_blob, classifier_to_blob
from .data import read_dataset_csv, write_dataset_csv
from .envs import EnvSpec, EnvSpecError, make_env, sample_trajectories
from .evaluate import (LatentModel, confusion_matrix, reward_sequence_error,
                       write_errors_csv)
from .lsfm import read_lsfm_csv, write_lsfm_csv
from .refine import (RefineConfig, refine_to_fixpoint, write_assignment_csv,
                     write_trace_csv)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_IO = 4


class ConfigError(ValueError):
    pass


def _require(config: dict, key: str) -> dict:
    if key not in config:
        raise ConfigError(f"config is missing the {key!r} section")
    return config[key]


def load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc


def parse_env_spec(section: dict) -> EnvSpec:
    known = {"kind", "grid_size", "dials", "digits", "broken_dial",
             "goal_pattern", "variant", "noise", "start_column", "seed"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown env fields: {sorted(unknown)}")
    if "goal_pattern" in section and section["goal_pattern"] is not None:
        section = dict(section)
        section["goal_pattern"] = tuple(
            None if g is None else int(g) for g in section["goal_pattern"])
    try:
        return EnvSpec(**section)
    except (EnvSpecError, TypeError) as exc:
        raise ConfigError(f"invalid env spec: {exc}") from exc


def parse_fit_config(section: dict) -> FitConfig:
    if "hidden" in section:
        section = dict(section)
        section["hidden"] = tuple(int(h) for h in section["hidden"])
    try:
        return FitConfig(**section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid classifier config: {exc}") from exc


def parse_refine_config(section: dict) -> RefineConfig:
    section = dict(section)
    for key in ("reward_fit", "sf_fit", "representation_fit"):
        if key in section:
            section[key] = parse_fit_config(section[key])
    try:
        return RefineConfig(**section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid refine config: {exc}") from exc


def parse_agent_config(section: dict) -> AgentConfig:
    try:
        return AgentConfig(**section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid agent config: {exc}") from exc


def _out_dir(config: dict, args) -> str:
    out = args.out or config.get("output_dir")
    if not out:
        raise ConfigError("no output directory (set output_dir or pass --out)")
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out_dir: str, command: str, entries: dict) -> None:
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write(f"command={command}\n")
        for key, value in entries.items():
            fh.write(f"{key}={value}\n")
        fh.write(f"created={time.strftime('%Y-%m-%dT%H:%M:%S')}\n")


def _apply_seed_override(args, *configs):
    if args.seed_override is None:
        return configs
    from dataclasses import replace
    return tuple(replace(c, seed=args.seed_override) for c in configs)


def cmd_generate(args) -> int:
    config = load_config(args.config)
    spec = parse_env_spec(_require(config, "env"))
    sampling = _require(config, "sampling")
    seed = args.seed_override if args.seed_override is not None \
        else int(sampling.get("seed", 0))
    out = _out_dir(config, args)
    env = make_env(spec)
    data = sample_trajectories(env, None, int(sampling["trajectories"]),
                               int(sampling["max_len"]), seed=seed)
    path = os.path.join(out, "dataset.csv")
    write_dataset_csv(data, path)
    _write_manifest(out, "generate", {
        "config": os.path.abspath(args.config), "seed": seed,
        "trajectories": len(data.trajectories),
        "transitions": data.n_transitions, "instances": data.n_instances})
    if not args.quiet:
        print(f"wrote {data.n_transitions} transitions "
              f"({data.n_instances} instances) to {path}")
    return EXIT_OK


def cmd_refine(args) -> int:
    config = load_config(args.config)
    if not args.dataset:
        raise ConfigError("refine requires --dataset")
    if not os.path.exists(args.dataset):
        raise ConfigError(f"dataset file not found: {args.dataset}")
    cfg = parse_refine_config(_require(config, "refine"))
    (cfg,) = _apply_seed_override(args, cfg)
    out = _out_dir(config, args)
    env_section = config.get("env")
    action_count = None
    if env_section:
        action_count = make_env(parse_env_spec(env_section)).action_count
    data = read_dataset_csv(args.dataset, action_count=action_count)
    result = refine_to_fixpoint(data, cfg)
    if not args.quiet:
        for e in result.trace:
            print(f"iteration {e.iteration} ({e.stage}): "
                  f"{e.non_terminal_count} non-terminal partitions, "
                  f"{e.ignored_count} ignored")
    write_trace_csv(result.trace, os.path.join(out, "trace.csv"))
    write_assignment_csv(result.assignment, os.path.join(out, "assignment.csv"))
    with open(os.path.join(out, "representation.json"), "w") as fh:
        fh.write(classifier_to_blob(result.representation))
    write_lsfm_csv(result.lsfm, os.path.join(out, "lsfm"))
    terminal = result.assignment.terminal_partition
    _write_manifest(out, "refine", {
        "config": os.path.abspath(args.config),
        "dataset": os.path.abspath(args.dataset), "seed": cfg.seed,
        "converged": int(result.converged),
        "partitions": result.assignment.partition_count,
        "non_terminal_partitions": result.assignment.non_terminal_count(),
        "terminal_partition": "" if terminal is None else terminal})
    if not result.converged:
        print("warning: refinement did not converge", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _load_latent_model(model_dir: str) -> tuple[LatentModel, int | None]:
    for name in ("representation.json", "manifest.txt"):
        if not os.path.exists(os.path.join(model_dir, name)):
            raise ConfigError(f"model bundle is missing {name}")
    with open(os.path.join(model_dir, "representation.json")) as fh:
        classifier = classifier_from_blob(fh.read())
    lsfm = read_lsfm_csv(os.path.join(model_dir, "lsfm"))
    terminal = None
    with open(os.path.join(model_dir, "manifest.txt")) as fh:
        for line in fh:
            key, _, value = line.strip().partition("=")
            if key == "terminal_partition" and value:
                terminal = int(value)
    return LatentModel(classifier, lsfm.w, lsfm.M,
                       terminal_partition=terminal), terminal


def cmd_eval(args) -> int:
    config = load_config(args.config)
    if not args.model or not args.dataset:
        raise ConfigError("eval requires --model and --dataset")
    if not os.path.exists(args.dataset):
        raise ConfigError(f"dataset file not found: {args.dataset}")
    out = _out_dir(config, args)
    model, _ = _load_latent_model(args.model)
    env = make_env(parse_env_spec(_require(config, "env")))
    data = read_dataset_csv(args.dataset, action_count=env.action_count)
    errors = reward_sequence_error(model, data)
    write_errors_csv(errors, os.path.join(out, "reward_errors.csv"))
    cm = confusion_matrix(data, model, env.label_of)
    cm.write_csv(os.path.join(out, "confusion.csv"))
    _write_manifest(out, "eval", {
        "config": os.path.abspath(args.config),
        "model": os.path.abspath(args.model),
        "dataset": os.path.abspath(args.dataset),
        "median_error": repr(float(np.median(errors)))})
    if not args.quiet:
        print(f"median reward-sequence error: {np.median(errors):.6f} "
              f"over {len(errors)} trajectories")
    return EXIT_OK


def cmd_transfer(args) -> int:
    config = load_config(args.config)
    train_spec = parse_env_spec(_require(config, "env"))
    transfer = _require(config, "transfer")
    test_specs = [parse_env_spec(s) for s in transfer.get("test_envs", [])]
    if not test_specs:
        raise ConfigError("transfer.test_envs must list at least one env")
    refine_cfg = parse_refine_config(_require(config, "refine"))
    agent_cfg = parse_agent_config(config.get("agents", {}))
    refine_cfg, agent_cfg = _apply_seed_override(args, refine_cfg, agent_cfg)
    out = _out_dir(config, args)
    result = run_transfer_suite(
        train_spec, test_specs, refine_cfg, agent_cfg,
        repeats=int(transfer.get("repeats", 1)),
        n_trajectories=int(transfer.get("trajectories", 500)),
        max_len=int(transfer.get("max_len", 100)))
    write_curves_csv(result, os.path.join(out, "curves.csv"))
    with open(os.path.join(out, "summary.csv"), "w") as fh:
        fh.write("task,agent,repeat,mean_reward_per_step\n")
        for task, agent, rep, mean in result.summaries:
            fh.write(f"{task},{agent},{rep},{mean!r}\n")
    _write_manifest(out, "transfer", {
        "config": os.path.abspath(args.config),
        "repeats": transfer.get("repeats", 1),
        "tasks": ";".join(sorted({s[0] for s in result.summaries}))})
    if not args.quiet:
        for task in sorted({s[0] for s in result.summaries}):
            line = ", ".join(
                f"{agent}: {result.mean_reward_per_step(task, agent).mean():.4f}"
                for agent in ("scratch", "pretrained-init", "reward-predictive"))
            print(f"{task} mean reward/step -> {line}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfrefine",
        description="Learn and evaluate reward-predictive state abstractions "
                    "from offline trajectory data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("refine", cmd_refine),
                     ("eval", cmd_eval), ("transfer", cmd_transfer)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--dataset", help="dataset CSV path")
        p.add_argument("--model", help="model bundle directory (eval)")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--seed-override", type=int, default=None)
        p.add_argument("--quiet", action="store_true")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.quiet:
        warnings.simplefilter("ignore")
    try:
        return args.fn(args)
    except (ConfigError, EnvSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
