"""Command-line driver.

Subcommands:
    run      execute one configured run (baseline / aw / awl)
    compare  run all three modes on identical budgets and print the ratio table
    eval     greedy-evaluate a checkpoint on the configured environment

Config files are JSON: flat keys plus a nested "env" section. Any key can be
overridden from the environment with the MARLPIPE_ prefix (MARLPIPE_SEED=7,
MARLPIPE_ENV_SCENARIO=8m, ...); command-line flags override both.
"""

from __future__ import annotations

import argparse
import json
import sys

from .bench import ExperimentConfig, run_experiment, throughput_compare
from .envs import EnvConfig
from .errors import ConfigError, MarlpipeError, RoleFailure
from .nets import load_checkpoint
from .runtime import greedy_eval
from .seeding import derive_int_seed

ENV_PREFIX = "MARLPIPE_"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ROLE_FAILURE = 3
EXIT_IO = 4
EXIT_OTHER = 1


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(cfg: dict, environ) -> dict:
    cfg = dict(cfg)
    env_section = dict(cfg.get("env", {}))
    for key, raw in sorted(environ.items()):
        if key.startswith(ENV_PREFIX + "ENV_"):
            env_section[key[len(ENV_PREFIX) + 4 :].lower()] = _parse_value(raw)
        elif key.startswith(ENV_PREFIX):
            cfg[key[len(ENV_PREFIX) :].lower()] = _parse_value(raw)
    if env_section:
        cfg["env"] = env_section
    return cfg


def _load_config(args, environ) -> ExperimentConfig:
    with open(args.config) as f:
        raw = json.load(f)
    raw = apply_env_overrides(raw, environ)
    for flag in ("mode", "seed", "out", "workers", "actors", "episodes"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    return ExperimentConfig.from_dict(raw)


def _banner(cfg: ExperimentConfig) -> str:
    return (
        f"topology: mode={cfg.mode} workers={cfg.workers} "
        f"actors_per_worker={cfg.actors} envs={cfg.n_envs} "
        f"episodes={cfg.episodes} seed={cfg.seed}"
    )


def cmd_run(args, environ) -> int:
    cfg = _load_config(args, environ)
    print(_banner(cfg))
    summary = run_experiment(cfg)
    print(json.dumps(summary, indent=2, default=str))
    if cfg.out:
        with open(cfg.out + ".summary.json", "w") as f:
            json.dump(summary, f, indent=2, default=str)
    return EXIT_OK


def cmd_compare(args, environ) -> int:
    cfg = _load_config(args, environ)
    results = throughput_compare(cfg)
    print(f"{'mode':<10}{'envs':>6}{'steps':>10}{'wall_s':>10}{'steps/sec':>12}{'ratio':>8}")
    base = results["baseline"]["steps_per_sec"]
    for mode in ("baseline", "aw", "awl"):
        r = results[mode]
        ratio = r["steps_per_sec"] / base if base > 0 else float("inf")
        print(
            f"{mode:<10}{r['topology']['n_envs']:>6}{r['env_steps']:>10}"
            f"{r['wall_time_s']:>10.2f}{r['steps_per_sec']:>12.1f}{ratio:>8.2f}"
        )
    if args.out:
        with open(args.out, "w") as f:
            json.dump(results, f, indent=2, default=str)
    return EXIT_OK


def cmd_eval(args, environ) -> int:
    with open(args.config) as f:
        raw = json.load(f)
    raw = apply_env_overrides(raw, environ)
    env_cfg = EnvConfig.from_dict(raw["env"])
    dims, flat = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    from .envs import optimal_joint_return

    game = env_cfg.game()
    optimum = optimal_joint_return(game) if game is not None else None
    mean, solve = greedy_eval(
        dims, flat, env_cfg, args.episodes, derive_int_seed(seed, "cli-eval"),
        optimum=optimum,
    )
    result = {"mean_return": mean, "solve_rate": solve, "episodes": args.episodes,
              "optimum_return": optimum}
    print(json.dumps(result, indent=2))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(result, f, indent=2)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marlpipe")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one configured run")
    compare = sub.add_parser("compare", help="baseline/aw/awl throughput comparison")
    ev = sub.add_parser("eval", help="greedy-evaluate a checkpoint")

    for p in (run, compare, ev):
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="metrics/results output path")
    for p in (run, compare):
        p.add_argument("--mode", choices=("baseline", "aw", "awl"), default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--actors", type=int, default=None)
        p.add_argument("--episodes", type=int, default=None)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--episodes", type=int, default=100)
    return parser


def main(argv=None, environ=None) -> int:
    import os

    environ = os.environ if environ is None else environ
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args, environ)
        if args.command == "compare":
            return cmd_compare(args, environ)
        if args.command == "eval":
            return cmd_eval(args, environ)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RoleFailure as e:
        print(f"role failure: {e}", file=sys.stderr)
        return EXIT_ROLE_FAILURE
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except MarlpipeError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    raise SystemExit(main())
