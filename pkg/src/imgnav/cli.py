"""Command line entry point: ``imgnav <subcommand> [options]``.

Every subcommand reads ``--config`` (YAML, optional), ``--seed`` and
``--run-dir``; ``--set key=value`` overrides single config keys.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import ending
from . import goal_policy as gp
from . import harness
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config
from .errors import ConfigurationError, ImgNavError, InvalidInputError
from .fmm import extract_path, solve_eikonal
from .gridworld import dumps_world, generate_world, load_world
from .mapping import write_pgm

GOAL_CKPT = "checkpoints/goal_policy.npz"
NEPM_CKPT = "checkpoints/nepm.npz"


def _overrides(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, **extra) -> Config:
    return load_config(args.config, **_overrides(args.set), **extra)


def _run_dir(args) -> Path:
    run = Path(args.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    return run


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def nepm_train_config(config: Config) -> ending.NEPMTrainConfig:
    return ending.NEPMTrainConfig(config.nepm_iters, config.nepm_lr, config.nepm_eps,
                                  config.nepm_batch, config.nepm_holdout)


# ------------------------------------------------------------- subcommands


def cmd_train_goal(args) -> None:
    config = _config(args, **({"sparse_reward": True} if args.sparse else {}))
    run = _run_dir(args)

    def progress(row, params):
        if row["update"] % 10 == 0 or row["update"] == config.n_updates - 1:
            _log(f"update {row['update']}: mean_reward {row['mean_reward']:.3f} entropy {row['entropy']:.3f}")

    params, log = gp.train_goal_policy(config, np.random.default_rng([args.seed, 1]), progress)
    save_checkpoint(run / GOAL_CKPT, params, "goal_policy", {"seed": args.seed, "config": config.to_dict()})
    log.write_csv(run / "training_log.csv")
    _log(f"wrote {run / GOAL_CKPT}")


def cmd_train_ending(args) -> None:
    config = _config(args)
    run = _run_dir(args)
    goal_params = None
    if not args.random_goals and (run / GOAL_CKPT).is_file():
        goal_params, _ = load_checkpoint(run / GOAL_CKPT, "goal_policy")
    rng = np.random.default_rng([args.seed, 7])
    _log(f"collecting {config.nepm_episodes} trajectories ({'policy' if goal_params is not None else 'random'} goals)")
    trajs = harness.collect_trajectories(config, goal_params, rng)
    pairs = ending.sample_pairs(trajs, config.nepm_pairs, rng)
    ending.save_pairs(pairs, run / "pairs.jsonl")
    init = ending.init_nepm_params(rng, gp.net_config(config).pano_dim)
    params, report = ending.train_nepm(pairs, init, nepm_train_config(config), rng)
    save_checkpoint(run / NEPM_CKPT, params, "nepm", {"seed": args.seed, "report": report.to_dict()})
    (run / "nepm_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    _log(f"held-out accuracy {report.accuracy:.3f} on {report.n_holdout} pairs")


def cmd_eval(args) -> None:
    extra = {"eval_agent": args.agent} if args.agent else {}
    config = _config(args, **extra)
    run = Path(args.run_dir)
    goal_params = nepm_params = None
    if config.eval_agent == "ours":
        goal_params, _ = load_checkpoint(run / GOAL_CKPT, "goal_policy")
    if config.eval_agent != "random_agent":
        nepm_params, _ = load_checkpoint(run / NEPM_CKPT, "nepm")
    jobs = harness.mixed_jobs(config, args.mixed) if args.mixed else None
    report = harness.evaluate(config, run, args.seed, goal_params, nepm_params, jobs)
    sys.stdout.write(report.to_csv())


def _world(args, config: Config):
    if args.world:
        return load_world(args.world)
    return generate_world(args.world_seed if args.world_seed is not None else args.seed, config.worldgen)


def _cell(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise InvalidInputError(f"cell must be 'row,col', got {text!r}") from None
    return r, c


def cmd_plan(args) -> None:
    config = _config(args)
    world = _world(args, config)
    start, goal = _cell(args.start), _cell(args.goal)
    field = solve_eikonal(world.obstacle_grid, goal, world.cell_size_m)
    path = extract_path(field, start)
    run = _run_dir(args)
    write_pgm(run / "distance_field.pgm", field.value)
    with (run / "path.jsonl").open("w") as fh:
        for r, c in path:
            fh.write(json.dumps([r, c]) + "\n")
    _log(f"path of {len(path)} cells, distance {field.value[start]:.3f} m")


def cmd_viz(args) -> None:
    config = _config(args)
    world = _world(args, config)
    run = _run_dir(args)
    (run / "world.txt").write_text(dumps_world(world))
    (run / "world.svg").write_text(harness.world_svg(world))
    write_pgm(run / "world.pgm", world.obstacle_grid.astype(float), maxval=1)
    _log(f"wrote world files to {run}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file of key: value overrides")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--run-dir", default="runs/default")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    parser = argparse.ArgumentParser(prog="imgnav", description="Image-goal navigation on a 2-D grid world.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-goal", parents=[common], help="train the long-term goal policy")
    p.add_argument("--sparse", action="store_true", help="goal and collision reward terms only")
    p.set_defaults(func=cmd_train_goal)

    p = sub.add_parser("train-ending", parents=[common], help="train the stop classifier")
    p.add_argument("--random-goals", action="store_true",
                   help="collect trajectories with random goals even if a policy checkpoint exists")
    p.set_defaults(func=cmd_train_ending)

    p = sub.add_parser("eval", parents=[common], help="evaluate on held-out worlds")
    p.add_argument("--agent", choices=["ours", "random_goal", "random_agent"])
    p.add_argument("--mixed", type=int, default=0, help="run N tasks with tiers in rotation instead of per-tier sets")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (("plan", cmd_plan, "plan on a fully known world"), ("viz", cmd_viz, "render a world")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--world", help="world file (generated from --world-seed if omitted)")
        p.add_argument("--world-seed", type=int)
        if name == "plan":
            p.add_argument("--start", required=True, help="row,col")
            p.add_argument("--goal", required=True, help="row,col")
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ImgNavError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
