"""Long-term goal policy: network, Gaussian goal head, reward and PPO."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import InternalInconsistencyError, NumericalFailureError
from .geometry import Pose
from .gridworld import LANDMARK_DIM, Panorama
from .mapping import OccupancyMap, assemble_channels, known_reachable_mask

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PolicyNetConfig:
    pano_dim: int = 36 * (1 + LANDMARK_DIM)
    stream_hidden: int = 64
    fusion: int = 64
    conv_filters: tuple[int, int] = (8, 16)
    map_hidden: int = 64
    trunk: int = 64
    grid: int = 32
    logvar_min: float = -5.0
    logvar_max: float = 1.0
    init_logvar: float = -2.0

    @property
    def conv_out(self) -> int:
        side = self.grid
        for _ in self.conv_filters:
            side = (side - 1) // 2 + 1
        return self.conv_filters[-1] * side * side


@dataclass
class PolicyInput:
    goal_panorama: Panorama
    current_panorama: Panorama
    channel_map: np.ndarray  # (4, G, G)


@dataclass(frozen=True)
class LongTermGoal:
    gx: float
    gy: float
    raw: tuple[float, float] | None = None

    @property
    def clamped(self) -> bool:
        return self.raw is not None and (self.raw[0], self.raw[1]) != (self.gx, self.gy)

    def to_cell(self, shape: tuple[int, int]) -> tuple[int, int]:
        rows, cols = shape
        return min(int(self.gy * rows), rows - 1), min(int(self.gx * cols), cols - 1)


# ------------------------------------------------------------------ inputs


def _bin_edges(n: int, g: int) -> np.ndarray:
    return (np.arange(g) * n) // g


def downsample_channels(planes: np.ndarray, grid: int) -> np.ndarray:
    """Shrink (4, R, C) planes to (4, G, G): area mean for the map planes,
    max for the location planes so a small disk cannot vanish."""
    _, rows, cols = planes.shape
    re, ce = _bin_edges(rows, grid), _bin_edges(cols, grid)
    counts = np.outer(np.diff(np.append(re, rows)), np.diff(np.append(ce, cols)))
    out = np.empty((planes.shape[0], grid, grid))
    for i, plane in enumerate(planes):
        if i < 2:
            s = np.add.reduceat(np.add.reduceat(plane, re, axis=0), ce, axis=1)
            out[i] = s / counts
        else:
            out[i] = np.maximum.reduceat(np.maximum.reduceat(plane, re, axis=0), ce, axis=1)
    return out


def make_policy_input(goal: Panorama, current: Panorama, omap: OccupancyMap, pose: Pose, grid: int = 32) -> PolicyInput:
    return PolicyInput(goal, current, downsample_channels(assemble_channels(omap, pose).planes, grid))


def stack_inputs(inputs: list[PolicyInput]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    goal = np.stack([i.goal_panorama.as_vector() for i in inputs])
    cur = np.stack([i.current_panorama.as_vector() for i in inputs])
    maps = np.stack([i.channel_map for i in inputs])
    return goal, cur, maps


# ----------------------------------------------------------------- network


def init_policy_params(cfg: PolicyNetConfig, rng: np.random.Generator) -> nn.Params:
    p = nn.init_siamese(rng, "pano", cfg.pano_dim, cfg.stream_hidden, cfg.fusion)
    c_in = 4
    for i, c_out in enumerate(cfg.conv_filters):
        p[f"conv{i}.W"] = rng.normal(0.0, math.sqrt(2.0 / (c_in * 9)), size=(c_out, c_in, 3, 3))
        p[f"conv{i}.b"] = np.zeros(c_out)
        c_in = c_out
    p["map.W"] = nn.he_init(rng, cfg.map_hidden, cfg.conv_out)
    p["map.b"] = np.zeros(cfg.map_hidden)
    p["t1.W"] = nn.he_init(rng, cfg.trunk, cfg.fusion + cfg.map_hidden)
    p["t1.b"] = np.zeros(cfg.trunk)
    p["t2.W"] = nn.he_init(rng, cfg.trunk, cfg.trunk)
    p["t2.b"] = np.zeros(cfg.trunk)
    p["mu.W"] = 0.01 * rng.normal(size=(2, cfg.trunk))
    p["mu.b"] = np.zeros(2)
    p["lv.W"] = 0.01 * rng.normal(size=(2, cfg.trunk))
    p["lv.b"] = np.full(2, cfg.init_logvar)
    p["v.W"] = 0.1 * rng.normal(size=(1, cfg.trunk))
    p["v.b"] = np.zeros(1)
    return p


def policy_forward(params: nn.Params, cfg: PolicyNetConfig, goal: np.ndarray, cur: np.ndarray, maps: np.ndarray):
    """Batched forward. Returns ``(mean, logvar, value, cache)``."""
    fused, c_siam = nn.siamese_forward(params, "pano", cur, goal)
    x = maps
    conv_caches = []
    for i in range(len(cfg.conv_filters)):
        z, c = nn.conv2d(x, params[f"conv{i}.W"], params[f"conv{i}.b"])
        conv_caches.append((c, z))
        x = nn.relu(z)
    flat = x.reshape(x.shape[0], -1)
    zm, cm = nn.dense(flat, params["map.W"], params["map.b"])
    m = nn.relu(zm)
    z1, c1 = nn.dense(np.concatenate([fused, m], axis=1), params["t1.W"], params["t1.b"])
    h1 = nn.relu(z1)
    z2, c2 = nn.dense(h1, params["t2.W"], params["t2.b"])
    h2 = nn.relu(z2)
    z_mu, _ = nn.dense(h2, params["mu.W"], params["mu.b"])
    z_lv, _ = nn.dense(h2, params["lv.W"], params["lv.b"])
    value, _ = nn.dense(h2, params["v.W"], params["v.b"])
    mean = nn.sigmoid(z_mu)
    logvar = np.clip(z_lv, cfg.logvar_min, cfg.logvar_max)
    nn.check_finite(mean, logvar, value, where="goal policy forward")
    cache = (c_siam, conv_caches, x.shape, cm, zm, c1, z1, c2, z2, h2, mean, z_lv)
    return mean, logvar, value[:, 0], cache


def policy_backward(params: nn.Params, cfg: PolicyNetConfig, cache, d_mean, d_logvar, d_value) -> nn.Params:
    c_siam, conv_caches, conv_shape, cm, zm, c1, z1, c2, z2, h2, mean, z_lv = cache
    grads: nn.Params = {}
    d_zmu = d_mean * mean * (1.0 - mean)
    inside = (z_lv > cfg.logvar_min) & (z_lv < cfg.logvar_max)
    d_zlv = d_logvar * inside
    d_h2 = nn.dense_backward(d_zmu, h2, params["mu.W"], grads, "mu")
    d_h2 = d_h2 + nn.dense_backward(d_zlv, h2, params["lv.W"], grads, "lv")
    d_h2 = d_h2 + nn.dense_backward(d_value[:, None], h2, params["v.W"], grads, "v")
    d = nn.relu_backward(d_h2, z2)
    d = nn.dense_backward(d, c2, params["t2.W"], grads, "t2")
    d = nn.relu_backward(d, z1)
    d_cat = nn.dense_backward(d, c1, params["t1.W"], grads, "t1")
    d_fused, d_m = d_cat[:, :cfg.fusion], d_cat[:, cfg.fusion:]
    nn.siamese_backward(params, "pano", d_fused, c_siam, grads)
    d = nn.relu_backward(d_m, zm)
    d = nn.dense_backward(d, cm, params["map.W"], grads, "map").reshape(conv_shape)
    for i in reversed(range(len(cfg.conv_filters))):
        c, z = conv_caches[i]
        d = nn.relu_backward(d, z)
        d = nn.conv2d_backward(d, c, params[f"conv{i}.W"], grads, f"conv{i}", need_input_grad=i > 0)
    return grads


def encode(inp: PolicyInput, params: nn.Params, cfg: PolicyNetConfig = PolicyNetConfig()):
    """Single-input forward: ``(mean in [0,1]^2, variance, value)``."""
    goal, cur, maps = stack_inputs([inp])
    mean, logvar, value, _ = policy_forward(params, cfg, goal, cur, maps)
    return mean[0], np.exp(logvar[0]), float(value[0])


# ------------------------------------------------------------ gaussian head


def gaussian_log_prob(a: np.ndarray, mean: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(LOG_2PI + logvar + (a - mean) ** 2 / np.exp(logvar), axis=-1)


def sample_goal(mean, variance, rng: np.random.Generator) -> tuple[LongTermGoal, float]:
    """Diagonal Gaussian draw clamped to the unit square.

    The log-probability is that of the raw (pre-clamp) sample.
    """
    mean = np.asarray(mean, float)
    variance = np.asarray(variance, float)
    if np.any(variance <= 0):
        raise NumericalFailureError("goal variance must be positive")
    raw = mean + np.sqrt(variance) * rng.standard_normal(2)
    logp = float(gaussian_log_prob(raw, mean, np.log(variance)))
    gx, gy = np.clip(raw, 0.0, 1.0)
    return LongTermGoal(float(gx), float(gy), (float(raw[0]), float(raw[1]))), logp


# ------------------------------------------------------------------ reward


@dataclass(frozen=True)
class RewardConfig:
    r_goal: float = 20.0
    r_collide: float = -5.0
    goal_radius_m: float = 1.0
    explore_coef: float = 1.0
    sparse: bool = False


@dataclass(frozen=True)
class RewardBreakdown:
    r_g: float
    r_collide: float
    r_explore: float

    @property
    def total(self) -> float:
        return self.r_g + self.r_collide + self.r_explore


def compute_reward(
    map_T: OccupancyMap,
    map_T_plus_k: OccupancyMap,
    goal_cell: tuple[int, int],
    predicted_goal_cell: tuple[int, int],
    agent_cell: tuple[int, int],
    first_scale: bool = False,
    cfg: RewardConfig = RewardConfig(),
) -> RewardBreakdown:
    """Reward for one time scale.

    ``map_T`` is the map when the goal was predicted, ``map_T_plus_k`` the
    map ``k`` steps later.  The exploration term pays for new area while the
    true goal is still unexplored and charges for it afterwards.
    """
    if np.any(map_T.explored & ~map_T_plus_k.explored):
        raise InternalInconsistencyError("explored sets of consecutive scales are not nested")
    h = map_T.cell_size_m
    d = h * math.hypot(predicted_goal_cell[0] - goal_cell[0], predicted_goal_cell[1] - goal_cell[1])
    r_g = cfg.r_goal if d <= cfg.goal_radius_m else 0.0
    reachable = known_reachable_mask(map_T, agent_cell)[tuple(predicted_goal_cell)]
    r_collide = 0.0 if reachable else cfg.r_collide
    if first_scale or cfg.sparse:
        r_explore = 0.0
    else:
        # difference of cell counts first, so the area change is exact
        gain = int(np.count_nonzero(map_T_plus_k.explored) - np.count_nonzero(map_T.explored)) * h * h
        r_explore = cfg.explore_coef * (-gain if map_T.explored[tuple(goal_cell)] else gain)
    return RewardBreakdown(float(r_g), float(r_collide), float(r_explore))


# ------------------------------------------------------------------ buffer


@dataclass
class RolloutBuffer:
    horizon: int
    n_envs: int
    pano_dim: int
    grid: int
    goal: np.ndarray = field(init=False)
    cur: np.ndarray = field(init=False)
    maps: np.ndarray = field(init=False)
    actions: np.ndarray = field(init=False)
    log_probs: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    rewards: np.ndarray = field(init=False)
    dones: np.ndarray = field(init=False)
    last_values: np.ndarray = field(init=False)
    returns: np.ndarray | None = None
    advantages: np.ndarray | None = None
    advantages_norm: np.ndarray | None = None

    def __post_init__(self):
        t, e = self.horizon, self.n_envs
        self.goal = np.zeros((t, e, self.pano_dim))
        self.cur = np.zeros((t, e, self.pano_dim))
        self.maps = np.zeros((t, e, 4, self.grid, self.grid))
        self.actions = np.zeros((t, e, 2))
        self.log_probs = np.zeros((t, e))
        self.values = np.zeros((t, e))
        self.rewards = np.zeros((t, e))
        self.dones = np.zeros((t, e), bool)
        self.last_values = np.zeros(e)

    def flat(self) -> dict[str, np.ndarray]:
        n = self.horizon * self.n_envs
        out = {
            "goal": self.goal.reshape(n, -1),
            "cur": self.cur.reshape(n, -1),
            "maps": self.maps.reshape(n, 4, self.grid, self.grid),
            "actions": self.actions.reshape(n, 2),
            "log_probs": self.log_probs.reshape(n),
            "values": self.values.reshape(n),
        }
        if self.returns is not None:
            out["returns"] = self.returns.reshape(n)
            out["advantages"] = self.advantages_norm.reshape(n)
        return out


def compute_returns_and_advantages(buffer: RolloutBuffer, tau: float = 0.99, lam: float = 0.95) -> RolloutBuffer:
    """Discounted returns (bootstrapped at the window edge) and GAE advantages.

    ``dones[t]`` marks that the episode ended after scale ``t``; nothing is
    carried across that boundary.
    """
    T = buffer.horizon
    returns = np.zeros_like(buffer.rewards)
    adv = np.zeros_like(buffer.rewards)
    next_return = buffer.last_values.copy()
    next_value = buffer.last_values.copy()
    gae = np.zeros(buffer.n_envs)
    for t in reversed(range(T)):
        live = 1.0 - buffer.dones[t].astype(float)
        returns[t] = buffer.rewards[t] + tau * live * next_return
        delta = buffer.rewards[t] + tau * live * next_value - buffer.values[t]
        gae = delta + tau * lam * live * gae
        adv[t] = gae
        next_return = returns[t]
        next_value = buffer.values[t]
    buffer.returns = returns
    buffer.advantages = adv
    buffer.advantages_norm = (adv - adv.mean()) / (adv.std() + 1e-8)
    return buffer


# --------------------------------------------------------------------- PPO


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    epochs: int = 4
    n_minibatches: int = 4
    lr: float = 3e-4
    adam_eps: float = 1e-6
    max_grad_norm: float | None = 0.5


def ppo_loss_terms(mean, logvar, value, batch, ppo: PPOConfig):
    """Clipped-surrogate loss and its gradient with respect to the network heads."""
    n = mean.shape[0]
    a = batch["actions"]
    adv = batch["advantages"]
    var = np.exp(logvar)
    logp = gaussian_log_prob(a, mean, logvar)
    ratio = np.exp(logp - batch["log_probs"])
    clipped = np.clip(ratio, 1.0 - ppo.clip, 1.0 + ppo.clip)
    surr1 = ratio * adv
    surr2 = clipped * adv
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    value_loss = np.mean((value - batch["returns"]) ** 2)
    entropy = np.mean(np.sum(0.5 * (1.0 + LOG_2PI + logvar), axis=1))
    loss = policy_loss + ppo.value_coef * value_loss - ppo.entropy_coef * entropy

    # gradient flows only through the unclipped branch where it is the minimum
    active = surr1 <= surr2
    d_logp = np.where(active, -ratio * adv / n, 0.0)
    diff = a - mean
    d_mean = d_logp[:, None] * diff / var
    d_logvar = d_logp[:, None] * (-0.5 + 0.5 * diff ** 2 / var)
    d_logvar = d_logvar - ppo.entropy_coef * 0.5 / n
    d_value = ppo.value_coef * 2.0 * (value - batch["returns"]) / n
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > ppo.clip)),
    }
    return stats, d_mean, d_logvar, d_value


def ppo_loss_and_grad(params, cfg: PolicyNetConfig, batch, ppo: PPOConfig):
    mean, logvar, value, cache = policy_forward(params, cfg, batch["goal"], batch["cur"], batch["maps"])
    stats, d_mean, d_logvar, d_value = ppo_loss_terms(mean, logvar, value, batch, ppo)
    if not math.isfinite(stats["loss"]):
        raise NumericalFailureError("non-finite PPO loss")
    return stats, policy_backward(params, cfg, cache, d_mean, d_logvar, d_value)


def ppo_update(
    params: nn.Params,
    buffer: RolloutBuffer,
    opt_state: nn.AdamState,
    cfg: PolicyNetConfig,
    ppo: PPOConfig,
    rng: np.random.Generator,
):
    """Several epochs of minibatch Adam on the clipped PPO objective.

    On a non-finite loss the update is abandoned and the incoming parameters
    are returned unchanged alongside ``stats["numerical_failure"] = True``.
    """
    data = buffer.flat()
    n = len(data["log_probs"])
    mb = max(1, n // ppo.n_minibatches)
    acc: dict[str, list[float]] = {}
    new_params = {k: v.copy() for k, v in params.items()}
    try:
        for _ in range(ppo.epochs):
            order = rng.permutation(n)
            for start in range(0, n, mb):
                idx = order[start:start + mb]
                batch = {k: v[idx] for k, v in data.items()}
                stats, grads = ppo_loss_and_grad(new_params, cfg, batch, ppo)
                grads = nn.clip_by_global_norm(grads, ppo.max_grad_norm)
                new_params = nn.adam_step(new_params, grads, opt_state)
                for k, v in stats.items():
                    acc.setdefault(k, []).append(v)
    except NumericalFailureError:
        return params, opt_state, {"numerical_failure": True}
    summary = {k: float(np.mean(v)) for k, v in acc.items()}
    summary["numerical_failure"] = False
    return new_params, opt_state, summary


# ---------------------------------------------------------------- training

LOG_COLUMNS = ("update", "mean_reward", "policy_loss", "value_loss", "entropy")


def net_config(config) -> PolicyNetConfig:
    return PolicyNetConfig(
        pano_dim=config.n_rays * (1 + LANDMARK_DIM),
        stream_hidden=config.hidden,
        fusion=config.hidden,
        map_hidden=config.hidden,
        trunk=config.hidden,
        grid=config.grid_size,
        init_logvar=config.init_logvar,
    )


def reward_config(config) -> RewardConfig:
    return RewardConfig(
        r_goal=config.r_goal,
        r_collide=config.r_collide,
        goal_radius_m=config.goal_radius_m,
        explore_coef=config.explore_coef,
        sparse=config.sparse_reward,
    )


def ppo_config(config) -> PPOConfig:
    return PPOConfig(
        clip=config.clip,
        value_coef=config.value_coef,
        entropy_coef=config.entropy_coef,
        epochs=config.ppo_epochs,
        n_minibatches=config.n_minibatches,
        lr=config.lr,
        adam_eps=config.adam_eps,
        max_grad_norm=config.max_grad_norm,
    )


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    clamp_events: int = 0

    def to_csv(self) -> str:
        lines = [",".join(LOG_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(str(row["update"]) if c == "update" else f"{row[c]:.10g}" for c in LOG_COLUMNS))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        from pathlib import Path

        Path(path).write_text(self.to_csv())


class _TaskSource:
    """Draws tasks on the training worlds, tiers in round-robin order."""

    def __init__(self, config, rng: np.random.Generator):
        from .gridworld import Difficulty

        self.config = config
        self.rng = rng
        self.seeds = list(config.train_world_seeds())
        self.tiers = list(Difficulty)
        self.worlds: dict = {}
        self.count = 0

    def world(self, seed: int):
        from .gridworld import generate_world

        if seed not in self.worlds:
            self.worlds[seed] = generate_world(seed, self.config.worldgen)
        return self.worlds[seed]

    def next(self):
        from .gridworld import sample_task

        world = self.world(self.seeds[int(self.rng.integers(len(self.seeds)))])
        tier = self.tiers[self.count % len(self.tiers)]
        self.count += 1
        return world, sample_task(world, tier, self.rng, self.config.sensor)


def train_goal_policy(config, rng: np.random.Generator, progress=None) -> tuple[nn.Params, TrainingLog]:
    """PPO over ``n_envs`` episodes stepped in lock-step (single worker).

    Each time scale: one batched forward, one sampled goal per env, then
    ``k_steps`` planner steps toward it.  An update happens every
    ``horizon_scales`` scales; episodes last ``scales_per_episode`` scales.
    """
    from .geometry import cell_of
    from .runner import Navigator

    cfg = net_config(config)
    rcfg = reward_config(config)
    pcfg = ppo_config(config)
    params = init_policy_params(cfg, rng)
    opt = nn.AdamState(lr=pcfg.lr, eps=pcfg.adam_eps)
    source = _TaskSource(config, rng)
    log = TrainingLog()

    def reset():
        world, task = source.next()
        nav = Navigator(world, task, config.motion, config.sensor)
        return nav, nav.observe()

    envs = [reset() for _ in range(config.n_envs)]
    scale_idx = [0] * config.n_envs

    for update in range(config.n_updates):
        buf = RolloutBuffer(config.horizon_scales, config.n_envs, cfg.pano_dim, cfg.grid)
        raw_rewards = []
        for t in range(config.horizon_scales):
            inputs = [
                make_policy_input(nav.task.goal_panorama, obs, nav.omap, nav.pose, cfg.grid)
                for nav, obs in envs
            ]
            goal, cur, maps = stack_inputs(inputs)
            mean, logvar, value, _ = policy_forward(params, cfg, goal, cur, maps)
            for e, (nav, obs) in enumerate(envs):
                ltg, logp = sample_goal(mean[e], np.exp(logvar[e]), rng)
                log.clamp_events += int(ltg.clamped)
                pred = ltg.to_cell(nav.omap.shape)
                map_T = nav.omap.copy()
                for _ in range(config.k_steps):
                    nav.plan_and_step(pred)
                    obs = nav.observe()
                true_goal = cell_of(nav.task.goal_pose.x, nav.task.goal_pose.y, nav.omap.cell_size_m)
                r = compute_reward(map_T, nav.omap, true_goal, pred, map_T.agent_cell, scale_idx[e] == 0, rcfg)
                raw_rewards.append(r.total)
                buf.goal[t, e], buf.cur[t, e], buf.maps[t, e] = goal[e], cur[e], maps[e]
                buf.actions[t, e] = ltg.raw
                buf.log_probs[t, e] = logp
                buf.values[t, e] = value[e]
                buf.rewards[t, e] = config.reward_scale * r.total
                scale_idx[e] += 1
                if scale_idx[e] >= config.scales_per_episode:
                    buf.dones[t, e] = True
                    scale_idx[e] = 0
                    envs[e] = reset()
                else:
                    envs[e] = (nav, obs)
        inputs = [make_policy_input(nav.task.goal_panorama, obs, nav.omap, nav.pose, cfg.grid) for nav, obs in envs]
        _, _, buf.last_values[:], _ = policy_forward(params, cfg, *stack_inputs(inputs))
        compute_returns_and_advantages(buf, config.tau, config.gae_lambda)
        params, opt, stats = ppo_update(params, buf, opt, cfg, pcfg, rng)
        if stats["numerical_failure"]:
            raise NumericalFailureError(f"PPO update {update} produced a non-finite loss")
        row = {
            "update": update,
            "mean_reward": float(np.mean(raw_rewards)),
            "policy_loss": stats["policy_loss"],
            "value_loss": stats["value_loss"],
            "entropy": stats["entropy"],
        }
        log.rows.append(row)
        if progress is not None:
            progress(row, params)
    return params, log
