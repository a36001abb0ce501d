"""Hierarchical episode loop, baselines, metrics and batch evaluation."""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import goal_policy as gp
from .config import Config
from .ending import Trajectory, should_stop
from .errors import ConfigurationError, InvalidInputError
from .geometry import AGENT_ACTIONS, Action, Pose
from .gridworld import Difficulty, NavTask, Panorama, World, generate_world, judge_success, sample_task
from .runner import Navigator

StopFn = Callable[[Panorama, Panorama], bool]
GoalFn = Callable[[Navigator, Panorama], gp.LongTermGoal]


@dataclass
class EpisodeRecord:
    task: NavTask
    poses: list[Pose]
    actions: list[Action]
    collisions: int
    stopped: bool
    steps: int
    success: bool
    path_length_m: float
    long_term_goals: list[gp.LongTermGoal] = field(default_factory=list)
    agent: str = "ours"
    world_seed: int | None = None

    def to_json(self) -> dict:
        return {
            "agent": self.agent,
            "world_seed": self.world_seed,
            "task": self.task.to_json(),
            "steps": self.steps,
            "stopped": self.stopped,
            "success": self.success,
            "collisions": self.collisions,
            "path_length_m": self.path_length_m,
            "final_pose": [self.poses[-1].x, self.poses[-1].y, self.poses[-1].heading],
            "actions": "".join("FRLS"[int(a)] for a in self.actions),
            "long_term_goals": [[g.gx, g.gy] for g in self.long_term_goals],
        }


def _finish(nav: Navigator, goals, agent: str, max_steps: int) -> EpisodeRecord:
    return EpisodeRecord(
        task=nav.task,
        poses=list(nav.poses),
        actions=list(nav.actions),
        collisions=nav.collisions,
        stopped=nav.stopped,
        steps=nav.steps,
        success=judge_success(nav.pose, nav.task.goal_pose, nav.stopped, nav.steps, max_steps),
        path_length_m=nav.path_length_m,
        long_term_goals=list(goals),
        agent=agent,
    )


def hierarchical_episode(
    world: World,
    task: NavTask,
    goal_fn: GoalFn,
    stop_fn: StopFn,
    config: Config = Config(),
    agent: str = "ours",
) -> EpisodeRecord:
    """Scan, stop check, goal refresh every ``k_steps``, one planner step; repeat."""
    nav = Navigator(world, task, config.motion, config.sensor)
    obs = nav.observe()
    goals: list[gp.LongTermGoal] = []
    goal_cell = None
    while nav.steps < config.max_episode_steps:
        if stop_fn(obs, task.goal_panorama):
            nav.apply(Action.STOP)
            break
        if nav.steps % config.k_steps == 0:
            goals.append(goal_fn(nav, obs))
            goal_cell = goals[-1].to_cell(nav.omap.shape)
        nav.plan_and_step(goal_cell)
        obs = nav.observe()
    return _finish(nav, goals, agent, config.max_episode_steps)


def policy_goal_fn(goal_params, config: Config, rng: np.random.Generator | None = None) -> GoalFn:
    """Greedy (mean) goals, or sampled ones when ``rng`` is given."""
    cfg = gp.net_config(config)

    def choose(nav: Navigator, obs: Panorama) -> gp.LongTermGoal:
        inp = gp.make_policy_input(nav.task.goal_panorama, obs, nav.omap, nav.pose, cfg.grid)
        mean, var, _ = gp.encode(inp, goal_params, cfg)
        if rng is None:
            return gp.LongTermGoal(float(mean[0]), float(mean[1]))
        return gp.sample_goal(mean, var, rng)[0]

    return choose


def random_goal_fn(rng: np.random.Generator) -> GoalFn:
    """Uniform over map cells, expressed at the cell centre."""

    def choose(nav: Navigator, obs: Panorama) -> gp.LongTermGoal:
        rows, cols = nav.omap.shape
        r, c = int(rng.integers(rows)), int(rng.integers(cols))
        return gp.LongTermGoal((c + 0.5) / cols, (r + 0.5) / rows)

    return choose


def nepm_stop_fn(nepm_params, threshold: float = 0.5) -> StopFn:
    return lambda cur, goal: should_stop(cur, goal, nepm_params, threshold)


def never_stop(cur: Panorama, goal: Panorama) -> bool:
    return False


def run_episode(world: World, task: NavTask, goal_params, nepm_params, config: Config = Config(),
                rng: np.random.Generator | None = None) -> EpisodeRecord:
    """Full agent. ``rng`` switches goal selection from greedy to sampled."""
    stop = nepm_stop_fn(nepm_params, config.stop_threshold) if nepm_params is not None else never_stop
    return hierarchical_episode(world, task, policy_goal_fn(goal_params, config, rng), stop, config, "ours")


def ablation_random_goal(world: World, task: NavTask, nepm_params, rng: np.random.Generator,
                         config: Config = Config()) -> EpisodeRecord:
    stop = nepm_stop_fn(nepm_params, config.stop_threshold) if nepm_params is not None else never_stop
    return hierarchical_episode(world, task, random_goal_fn(rng), stop, config, "random_goal")


def baseline_random_agent(world: World, task: NavTask, rng: np.random.Generator,
                          config: Config = Config()) -> EpisodeRecord:
    nav = Navigator(world, task, config.motion, config.sensor)
    while nav.steps < config.max_episode_steps and not nav.stopped:
        nav.apply(AGENT_ACTIONS[int(rng.integers(len(AGENT_ACTIONS)))])
    return _finish(nav, [], "random_agent", config.max_episode_steps)


def ablation_sparse_reward(config: Config, rng: np.random.Generator, progress=None):
    return gp.train_goal_policy(config.replace(sparse_reward=True), rng, progress)


# ----------------------------------------------------------------- metrics


@dataclass
class MetricsReport:
    sr: float
    spl: float
    cr: float
    n_episodes: int
    per_tier: dict[str, "MetricsReport"] = field(default_factory=dict)

    CSV_HEADER = "tier,n_episodes,sr,spl,cr"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for name, rep in sorted(self.per_tier.items()):
            lines.append(f"{name},{rep.n_episodes},{rep.sr:.6f},{rep.spl:.6f},{rep.cr:.6f}")
        lines.append(f"all,{self.n_episodes},{self.sr:.6f},{self.spl:.6f},{self.cr:.6f}")
        return "\n".join(lines) + "\n"


def _spl_term(rec: EpisodeRecord) -> float:
    if not rec.success:
        return 0.0
    shortest = rec.task.shortest_path_m
    return shortest / max(shortest, rec.path_length_m)


def _summary(records: list[EpisodeRecord]) -> MetricsReport:
    n = len(records)
    return MetricsReport(
        sr=sum(r.success for r in records) / n,
        spl=sum(_spl_term(r) for r in records) / n,
        cr=sum(r.collisions > 0 for r in records) / n,
        n_episodes=n,
    )


def compute_metrics(records: list[EpisodeRecord]) -> MetricsReport:
    if not records:
        raise InvalidInputError("no episode records to score")
    report = _summary(records)
    tiers: dict[str, list[EpisodeRecord]] = {}
    for r in records:
        tiers.setdefault(Difficulty(r.task.difficulty).value, []).append(r)
    report.per_tier = {name: _summary(recs) for name, recs in tiers.items()}
    return report


# -------------------------------------------------------------- evaluation


def _episode_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


_WORLD_CACHE: dict[tuple, World] = {}


def cached_world(seed: int, config: Config) -> World:
    key = (seed, config.worldgen)
    if key not in _WORLD_CACHE:
        _WORLD_CACHE[key] = generate_world(seed, config.worldgen)
    return _WORLD_CACHE[key]


@dataclass(frozen=True)
class EvalJob:
    world_seed: int
    tier: Difficulty
    index: int


def eval_jobs(config: Config, tiers=tuple(Difficulty), tasks_per_tier: int | None = None) -> list[EvalJob]:
    n = config.tasks_per_tier if tasks_per_tier is None else tasks_per_tier
    if n <= 0:
        raise InvalidInputError("tasks_per_tier must be positive")
    seeds = list(config.eval_world_seeds())
    if set(seeds) & set(config.train_world_seeds()):
        raise ConfigurationError("evaluation worlds overlap training worlds")
    return [EvalJob(seeds[i % len(seeds)], Difficulty(t), i) for t in tiers for i in range(n)]


def mixed_jobs(config: Config, n: int) -> list[EvalJob]:
    """``n`` tasks with tiers in rotation."""
    if n <= 0:
        raise InvalidInputError("task count must be positive")
    seeds = list(config.eval_world_seeds())
    tiers = list(Difficulty)
    return [EvalJob(seeds[i % len(seeds)], tiers[i % 3], i) for i in range(n)]


def job_task(job: EvalJob, config: Config, seed: int) -> tuple[World, NavTask]:
    """The task depends only on the job and the seed, never on the agent."""
    world = cached_world(job.world_seed, config)
    tier_id = list(Difficulty).index(job.tier)
    task = sample_task(world, job.tier, _episode_rng(seed, 0, tier_id, job.index), config.sensor)
    return world, task


def run_job(job: EvalJob, config: Config, seed: int, goal_params, nepm_params) -> EpisodeRecord:
    world, task = job_task(job, config, seed)
    tier_id = list(Difficulty).index(job.tier)
    rng = _episode_rng(seed, 1, tier_id, job.index)
    agent = config.eval_agent
    if agent == "random_agent":
        rec = baseline_random_agent(world, task, rng, config)
    elif agent == "random_goal":
        rec = ablation_random_goal(world, task, nepm_params, rng, config)
    else:
        rec = run_episode(world, task, goal_params, nepm_params, config, rng if config.eval_sampling else None)
    rec.world_seed = job.world_seed
    return rec


def _run_job_star(args):
    return run_job(*args)


def run_jobs(jobs: list[EvalJob], config: Config, seed: int, goal_params, nepm_params) -> list[EpisodeRecord]:
    args = [(j, config, seed, goal_params, nepm_params) for j in jobs]
    if config.workers <= 1:
        return [run_job(*a) for a in args]
    with ProcessPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(_run_job_star, args, chunksize=4))


def evaluate(config: Config, run_dir, seed: int, goal_params=None, nepm_params=None,
             jobs: list[EvalJob] | None = None) -> MetricsReport:
    """Run the held-out task set and write ``metrics.csv``, ``episodes.jsonl``
    and ``trajectories/*.svg`` under ``run_dir``."""
    if config.eval_agent == "ours" and goal_params is None:
        raise ConfigurationError("evaluating the full agent needs goal-policy parameters")
    if config.eval_agent != "random_agent" and nepm_params is None:
        raise ConfigurationError("evaluating a stopping agent needs ending-classifier parameters")
    jobs = eval_jobs(config) if jobs is None else jobs
    records = run_jobs(jobs, config, seed, goal_params, nepm_params)
    report = compute_metrics(records)
    out = Path(run_dir)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    with (out / "episodes.jsonl").open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    for i, rec in enumerate(records[:config.n_svgs]):
        world = cached_world(rec.world_seed, config)
        (out / "trajectories" / f"episode_{i:03d}.svg").write_text(trajectory_svg(world, rec))
    return report


# ------------------------------------------------------ classifier data


def collect_trajectories(config: Config, goal_params, rng: np.random.Generator,
                         n_episodes: int | None = None) -> list[Trajectory]:
    """Full-length policy rollouts (sampled goals, no stopping) on training worlds."""
    n = config.nepm_episodes if n_episodes is None else n_episodes
    seeds = list(config.train_world_seeds())
    tiers = list(Difficulty)
    trajectories = []
    for i in range(n):
        world = cached_world(seeds[int(rng.integers(len(seeds)))], config)
        task = sample_task(world, tiers[i % 3], rng, config.sensor)
        nav = Navigator(world, task, config.motion, config.sensor)
        choose = policy_goal_fn(goal_params, config, rng) if goal_params is not None else random_goal_fn(rng)
        traj = [(nav.observe(), nav.pose)]
        goal_cell = None
        while nav.steps < config.max_episode_steps:
            if nav.steps % config.k_steps == 0:
                goal_cell = choose(nav, traj[-1][0]).to_cell(nav.omap.shape)
            nav.plan_and_step(goal_cell)
            traj.append((nav.observe(), nav.pose))
        trajectories.append(traj)
    return trajectories


# --------------------------------------------------------------------- SVG


def _svg_world(world: World, s: float) -> list[str]:
    h = world.cell_size_m
    rows, cols = world.shape
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{cols * h * s:.0f}" height="{rows * h * s:.0f}" '
        f'viewBox="0 0 {cols * h * s:.1f} {rows * h * s:.1f}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    grid = world.obstacle_grid
    for r in range(rows):
        c = 0
        while c < cols:
            if grid[r, c]:
                start = c
                while c < cols and grid[r, c]:
                    c += 1
                parts.append(
                    f'<rect x="{start * h * s:.1f}" y="{r * h * s:.1f}" width="{(c - start) * h * s:.1f}" '
                    f'height="{h * s:.1f}" fill="#333"/>'
                )
            c += 1
    return parts


def world_svg(world: World, px_per_m: float = 60.0) -> str:
    """Obstacle layout only, as run-length rectangles."""
    return "\n".join(_svg_world(world, px_per_m) + ["</svg>"]) + "\n"


def trajectory_svg(world: World, rec: EpisodeRecord, px_per_m: float = 60.0) -> str:
    h = world.cell_size_m
    rows, cols = world.shape
    s = px_per_m
    parts = _svg_world(world, s)
    pts = " ".join(f"{p.x * s:.1f},{p.y * s:.1f}" for p in rec.poses)
    parts.append(f'<polyline points="{pts}" fill="none" stroke="red" stroke-width="2"/>')
    w_m, h_m = cols * h, rows * h
    for g in rec.long_term_goals:
        parts.append(f'<circle cx="{g.gx * w_m * s:.1f}" cy="{g.gy * h_m * s:.1f}" r="6" fill="none" stroke="blue"/>')
    goal = rec.task.goal_pose
    parts.append(f'<circle cx="{goal.x * s:.1f}" cy="{goal.y * s:.1f}" r="5" fill="green"/>')
    start = rec.task.start_pose
    parts.append(f'<rect x="{start.x * s - 4:.1f}" y="{start.y * s - 4:.1f}" width="8" height="8" fill="orange"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def spl_upper_bound_holds(report: MetricsReport) -> bool:
    return report.spl <= report.sr + 1e-12 and all(t.spl <= t.sr + 1e-12 for t in report.per_tier.values())

