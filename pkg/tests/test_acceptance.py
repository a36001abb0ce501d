"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The learning criteria (5, 6, 7) drive the shipped CLI end to end on the
default configuration for seeds 0, 1 and 2, so this module takes roughly
half an hour on one CPU core.
"""
import math
import shutil
import time

import numpy as np
import pytest

from imgnav import nn
from imgnav.cli import main
from imgnav.ending import bce_loss_and_grad, init_nepm_params, label_pair
from imgnav.fmm import replan_step, solve_eikonal
from imgnav.geometry import MotionConfig, Pose, cell_of
from imgnav.goal_policy import (
    PolicyNetConfig,
    PPOConfig,
    RewardConfig,
    compute_reward,
    gaussian_log_prob,
    init_policy_params,
    policy_backward,
    policy_forward,
    ppo_loss_terms,
)
from imgnav.gridworld import World, generate_world, step
from imgnav.harness import compute_metrics, spl_upper_bound_holds
from imgnav.mapping import OccupancyMap
from oracles import central_fd, dijkstra_field, lattice_reachable
from test_harness import FIXTURES, rec

SEEDS = (0, 1, 2)


def rect_map(rng: np.random.Generator, n: int, walls: bool = True) -> np.ndarray:
    """Random axis-aligned rectangles, optionally inside a border wall."""
    g = np.zeros((n, n), bool)
    if walls:
        g[0] = g[-1] = g[:, 0] = g[:, -1] = True
    for _ in range(int(rng.integers(3, 9))):
        r, c = rng.integers(1, n - 4, 2)
        hh, ww = rng.integers(2, n // 4, 2)
        g[r:r + hh, c:c + ww] = True
    return g


# --------------------------------------------------------------- criterion 1


def test_criterion_1_fmm_matches_oracles(verdict):
    h = 0.1
    solve_eikonal(np.zeros((8, 8), bool), (0, 0), h)  # compile outside the timed region
    t0 = time.perf_counter()
    worst_dijkstra = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        g = rect_map(rng, 64, walls=False)
        free = np.argwhere(~g)
        src = tuple(free[rng.integers(len(free))])
        f = solve_eikonal(g, src, h).value
        d, hops = dijkstra_field(g, src, h)
        both = np.isfinite(f) & np.isfinite(d)
        assert np.array_equal(np.isfinite(f), np.isfinite(d))
        excess = np.abs(f[both] - d[both]) / (h * np.maximum(hops[both], 1))
        worst_dijkstra = max(worst_dijkstra, float(excess.max()))
    lo, hi = math.inf, 0.0
    r, c = np.indices((64, 64))
    for seed in range(50):
        src = tuple(np.random.default_rng(1000 + seed).integers(0, 64, 2))
        f = solve_eikonal(np.zeros((64, 64), bool), src, h).value
        euclid = np.hypot(r - src[0], c - src[1])
        far = euclid >= 5
        ratio = f[far] / (euclid[far] * h)
        lo, hi = min(lo, float(ratio.min())), max(hi, float(ratio.max()))
    elapsed = time.perf_counter() - t0
    ok = worst_dijkstra <= 0.15 and lo >= 1.0 - 1e-9 and hi <= 1.06 and elapsed < 10.0
    verdict(1, "FMM oracle equivalence", ok,
            f"max |FMM-Dijkstra| {worst_dijkstra:.4f} h per path cell (<= 0.15); "
            f"free-space ratio [{lo:.4f}, {hi:.4f}] (within [1, 1.06]); {elapsed:.2f} s (< 10)")


# --------------------------------------------------------------- criterion 2


def _planner_trial(i: int, motion: MotionConfig):
    """One start/goal on a known static map; returns (reached, collisions)."""
    rng = np.random.default_rng(i)
    h = 0.1
    if i % 2:
        world = generate_world(1000 + i)
        g = world.obstacle_grid
    else:
        g = rect_map(rng, 40)
        world = World(4.0, 4.0, h, g)
    free = np.argwhere(~g)
    r, c = free[rng.integers(len(free))]
    pose = Pose((c + 0.5) * h, (r + 0.5) * h, int(rng.integers(4)) * math.pi / 2)
    # reachable means reachable by the agent's own hops, not just by cells
    targets = lattice_reachable(g, h, pose, motion)
    goal = cell_of(*targets[rng.integers(len(targets))], h)
    omap = OccupancyMap.empty(g.shape, h)
    omap.obstacle[:] = g
    omap.explored[:] = True
    hits = 0
    for _ in range(1000):
        here = cell_of(pose.x, pose.y, h)
        if max(abs(here[0] - goal[0]), abs(here[1] - goal[1])) <= 1:
            return True, hits
        pose, hit = step(world, pose, replan_step(omap, pose, goal, motion), motion)
        hits += hit
    return False, hits


def test_criterion_2_planner_safety(verdict):
    motion = MotionConfig()
    _planner_trial(0, motion)  # compile outside the timed region
    t0 = time.perf_counter()
    results = [_planner_trial(i, motion) for i in range(100)]
    elapsed = time.perf_counter() - t0
    reached = sum(ok for ok, _ in results)
    collisions = sum(hits for _, hits in results)
    ok = reached == 100 and collisions == 0 and elapsed < 30.0
    verdict(2, "planner safety", ok,
            f"{reached}/100 goals reached within 1 cell, {collisions} collisions, {elapsed:.1f} s (< 30)")


# --------------------------------------------------------------- criterion 3


def _maps(explored_cols: int):
    m0 = OccupancyMap.empty((40, 40), 0.1)
    m0.explored[:, :explored_cols] = True
    return m0, m0.copy()


def test_criterion_3_reward_exactness(verdict):
    checks = {}
    m0, m1 = _maps(15)
    m1.explored[20:26, 25:40] = True  # 90 new cells
    r = compute_reward(m0, m1, (5, 17), (5, 11), (5, 5))
    checks["goal hit, unexplored goal"] = (r.r_g, r.r_collide, r.r_explore, r.total) == (20.0, 0.0, 0.9, 20.9)
    m0, m1 = _maps(20)
    m0.obstacle[10, 10] = m1.obstacle[10, 10] = True
    r = compute_reward(m0, m1, (30, 30), (10, 10), (5, 5))
    checks["collide"] = (r.r_g, r.r_collide, r.r_explore) == (0.0, -5.0, 0.0)
    m0, m1 = _maps(15)
    m1.explored[39, 15:22] = True
    checks["first scale zero"] = compute_reward(m0, m1, (5, 30), (5, 5), (5, 5), first_scale=True).r_explore == 0.0
    m0, m1 = _maps(15)
    m1.explored[30:35, 15:25] = True  # 50 new cells, goal already explored
    checks["explored goal negative"] = compute_reward(m0, m1, (5, 5), (30, 39), (5, 5)).r_explore == -0.5
    checks["sparse drops term"] = compute_reward(m0, m1, (5, 30), (5, 5), (5, 5), cfg=RewardConfig(sparse=True)).r_explore == 0.0
    rng = np.random.default_rng(0)
    algebra = True
    for _ in range(2000):
        cols, grow = int(rng.integers(1, 40)), int(rng.integers(0, 40))
        m0, m1 = _maps(cols)
        m1.explored[39, cols:cols + grow] = True
        goal, pred = tuple(rng.integers(0, 40, 2)), tuple(rng.integers(0, 40, 2))
        first = bool(rng.integers(2))
        r = compute_reward(m0, m1, goal, pred, (0, 0), first)
        # area is cell count times h squared, evaluated in that order
        gain = int(m1.explored.sum() - m0.explored.sum()) * 0.1 * 0.1
        # the explored block [0, cols) is one connected component holding the agent
        expected = (
            20.0 if 0.1 * math.hypot(goal[0] - pred[0], goal[1] - pred[1]) <= 1.0 else 0.0,
            0.0 if pred[1] < cols else -5.0,
            0.0 if first else (-gain if m0.explored[goal] else gain),
        )
        algebra &= (r.r_g, r.r_collide, r.r_explore) == expected
        algebra &= r.total == r.r_g + r.r_collide + r.r_explore
    checks["total-sum algebra (2000 draws)"] = bool(algebra)
    failed = [k for k, v in checks.items() if not v]
    verdict(3, "reward exactness", not failed,
            f"{len(checks) - len(failed)}/{len(checks)} exact checks" + (f"; failed: {', '.join(failed)}" if failed else ""))


# --------------------------------------------------------------- criterion 4

TOY = PolicyNetConfig(pano_dim=6, stream_hidden=4, fusion=3, conv_filters=(2, 2), map_hidden=3, trunk=4, grid=6)


def _toy_params(rng):
    p = init_policy_params(TOY, rng)
    for k in p:
        if k.endswith(".b") and k != "lv.b":
            p[k] = p[k] + 0.1 * rng.normal(size=p[k].shape)  # off the relu kinks
    p["mu.W"] = 0.5 * rng.normal(size=p["mu.W"].shape)
    p["lv.W"] = 0.3 * rng.normal(size=p["lv.W"].shape)
    return p


def _toy_inputs(rng, n):
    return rng.normal(size=(n, 6)), rng.normal(size=(n, 6)), rng.random((n, 4, 6, 6))


def test_criterion_4_gradient_fidelity(verdict):
    rng = np.random.default_rng(3)
    errors = {}

    p = _toy_params(rng)
    goal, cur, maps = _toy_inputs(rng, 5)
    u_mean, u_lv, u_v = rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), rng.normal(size=5)

    def encoder_loss(vec):
        mean, logvar, value, _ = policy_forward(nn.unflatten(vec, p), TOY, goal, cur, maps)
        return float(np.sum(mean * u_mean) + np.sum(logvar * u_lv) + np.sum(value * u_v))

    cache = policy_forward(p, TOY, goal, cur, maps)[3]
    grads = policy_backward(p, TOY, cache, u_mean, u_lv, u_v)
    errors["encoder"] = nn.relative_error(nn.flatten(grads), central_fd(encoder_loss, nn.flatten(p)))

    goal, cur, maps = _toy_inputs(rng, 8)
    mean, logvar, _, _ = policy_forward(p, TOY, goal, cur, maps)
    actions = mean + 0.3 * rng.normal(size=mean.shape)
    batch = {
        "goal": goal, "cur": cur, "maps": maps, "actions": actions,
        "log_probs": gaussian_log_prob(actions, mean, logvar) + 0.3 * rng.normal(size=8),
        "advantages": rng.normal(size=8), "returns": rng.normal(size=8), "values": np.zeros(8),
    }
    ppo = PPOConfig()

    def ppo_loss(vec):
        m, lv, v, _ = policy_forward(nn.unflatten(vec, p), TOY, goal, cur, maps)
        return ppo_loss_terms(m, lv, v, batch, ppo)[0]["loss"]

    m, lv, v, cache = policy_forward(p, TOY, goal, cur, maps)
    _, dm, dl, dv = ppo_loss_terms(m, lv, v, batch, ppo)
    grads = policy_backward(p, TOY, cache, dm, dl, dv)
    errors["PPO loss"] = nn.relative_error(nn.flatten(grads), central_fd(ppo_loss, nn.flatten(p)))

    q = init_nepm_params(rng, 7, 5, 4)
    q["out.W"] = rng.normal(size=q["out.W"].shape)
    for k in q:
        if k.endswith(".b"):
            q[k] = 0.1 * rng.normal(size=q[k].shape)
    a, b = rng.normal(size=(6, 7)), rng.normal(size=(6, 7))
    labels = np.array([1, 0, 1, 1, 0, 0], float)
    _, grads = bce_loss_and_grad(q, a, b, labels)
    numeric = central_fd(lambda vec: bce_loss_and_grad(nn.unflatten(vec, q), a, b, labels)[0], nn.flatten(q))
    errors["BCE"] = nn.relative_error(nn.flatten(grads), numeric)

    ok = all(e < 1e-4 for e in errors.values())
    verdict(4, "gradient fidelity", ok, ", ".join(f"{k} rel err {e:.2e}" for k, e in errors.items()) + " (< 1e-4)")


# ------------------------------------------------------- criteria 5, 6 and 7


def _metrics(path) -> dict[str, tuple[float, float]]:
    rows = [line.split(",") for line in path.read_text().splitlines()[1:]]
    return {row[0]: (float(row[2]), float(row[3])) for row in rows}


def _cli(*args) -> None:
    assert main(list(args)) == 0, f"CLI call failed: {args}"


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    """Full, sparse and random-goal agents per seed, all through the CLI."""
    out = {}
    for seed in SEEDS:
        base = tmp_path_factory.mktemp(f"seed{seed}")
        full, sparse = base / "full", base / "sparse"
        s = str(seed)
        t0 = time.perf_counter()
        _cli("train-ending", "--random-goals", "--run-dir", str(full), "--seed", s)
        _cli("train-goal", "--run-dir", str(full), "--seed", s)
        train_minutes = (time.perf_counter() - t0) / 60
        _cli("train-goal", "--sparse", "--run-dir", str(sparse), "--seed", s)
        (sparse / "checkpoints").mkdir(exist_ok=True)
        shutil.copy(full / "checkpoints" / "nepm.npz", sparse / "checkpoints" / "nepm.npz")
        sr = {}
        for name, run, agent in (("full", full, "ours"), ("rp", full, "random_goal"), ("sparse", sparse, "ours")):
            _cli("eval", "--mixed", "200", "--agent", agent, "--run-dir", str(run), "--seed", s)
            sr[name] = _metrics(run / "metrics.csv")["all"][0]
        out[seed] = {"dir": full, "sr": sr, "train_minutes": train_minutes,
                     "nepm": (full / "nepm_report.json").read_text()}
    return out


def test_criterion_5_learning_signal(pipelines, verdict):
    full = np.mean([pipelines[s]["sr"]["full"] for s in SEEDS])
    rp = np.mean([pipelines[s]["sr"]["rp"] for s in SEEDS])
    sparse = np.mean([pipelines[s]["sr"]["sparse"] for s in SEEDS])
    slowest = max(pipelines[s]["train_minutes"] for s in SEEDS)
    per_seed = "; ".join(
        f"seed {s}: full {pipelines[s]['sr']['full']:.3f} rp {pipelines[s]['sr']['rp']:.3f} "
        f"sparse {pipelines[s]['sr']['sparse']:.3f}" for s in SEEDS
    )
    ok = full - rp >= 0.05 and sparse < full and slowest <= 30.0
    verdict(5, "learning signal", ok,
            f"mean SR full {full:.3f} vs random-goal {rp:.3f} (margin {100 * (full - rp):.1f} pp, need >= 5) "
            f"vs sparse {sparse:.3f} (need < full); training <= {slowest:.1f} min per seed; {per_seed}")


def test_criterion_6_tier_monotonicity(pipelines, verdict, tmp_path):
    run = pipelines[SEEDS[0]]["dir"]
    _cli("eval", "--agent", "ours", "--run-dir", str(run), "--seed", str(SEEDS[0]))
    m = _metrics(run / "metrics.csv")
    easy, medium, hard = m["easy"][0], m["medium"][0], m["hard"][0]
    verdict(6, "tier monotonicity", easy >= medium >= hard,
            f"SR easy {easy:.3f} >= medium {medium:.3f} >= hard {hard:.3f} on 200 tasks per tier")


def test_criterion_7_nepm_quality(pipelines, verdict):
    import json

    acc = [json.loads(pipelines[s]["nepm"])["accuracy"] for s in SEEDS]
    boundaries = label_pair(0.999) == 1 and label_pair(1.0) == 1 and label_pair(1.001) == 0
    verdict(7, "ending classifier quality", min(acc) >= 0.90 and boundaries,
            f"held-out balanced accuracy {', '.join(f'{a:.3f}' for a in acc)} (>= 0.90); "
            f"labels at 0.999/1.000/1.001 m = {label_pair(0.999)}/{label_pair(1.0)}/{label_pair(1.001)}")


# --------------------------------------------------------------- criterion 8


def test_criterion_8_metric_correctness(verdict):
    exact = 0
    for records, sr, spl, cr in FIXTURES:
        m = compute_metrics(records)
        exact += (m.sr, m.spl, m.cr) == (sr, spl, cr)
    rng = np.random.default_rng(0)
    bound = True
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        records = [rec(float(rng.uniform(1.5, 10)), float(rng.uniform(0, 60)), bool(rng.integers(2)),
                       int(rng.integers(0, 3))) for _ in range(n)]
        bound &= spl_upper_bound_holds(compute_metrics(records))
    ok = exact == len(FIXTURES) and bound
    verdict(8, "metric correctness", ok,
            f"{exact}/{len(FIXTURES)} fixture sets exact; SPL <= SR on {'all' if bound else 'not all'} 1000 generated reports")


# --------------------------------------------------------------- criterion 9

SMOKE = [
    "--set", "n_envs=2", "--set", "n_updates=3", "--set", "n_train_worlds=3",
    "--set", "hidden=16", "--set", "grid_size=16",
    "--set", "nepm_episodes=3", "--set", "nepm_pairs=400", "--set", "nepm_iters=40",
    "--set", "tasks_per_tier=3", "--set", "max_episode_steps=60", "--set", "workers=1",
]


def test_criterion_9_reproducibility(verdict, tmp_path):
    outputs = []
    for name in ("a", "b"):
        run = str(tmp_path / name)
        files = {}
        _cli("train-goal", "--run-dir", run, "--seed", "5", *SMOKE)
        _cli("train-ending", "--run-dir", run, "--seed", "5", *SMOKE)
        for agent in ("ours", "random_goal", "random_agent"):
            _cli("eval", "--agent", agent, "--run-dir", run, "--seed", "5", *SMOKE)
            files[agent] = (tmp_path / name / "metrics.csv").read_bytes()
        files["checkpoints"] = b"".join(
            (tmp_path / name / "checkpoints" / f).read_bytes() for f in ("goal_policy.npz", "nepm.npz"))
        outputs.append(files)
    same = [k for k in outputs[0] if outputs[0][k] == outputs[1][k]]
    ok = len(same) == len(outputs[0])
    verdict(9, "reproducibility", ok,
            f"byte-identical on repeat: {', '.join(same)} ({len(same)}/{len(outputs[0])}); single worker")
