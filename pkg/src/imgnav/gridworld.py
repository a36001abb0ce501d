"""Synthetic 2-D worlds: geometry, kinematics, panoramas and task sampling."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

from . import fmm
from .errors import InvalidInputError, UnsatisfiableTierError
from .geometry import (
    Action,
    MotionConfig,
    Pose,
    cell_center,
    cell_of,
    forward_target,
    in_bounds,
    normalize_heading,
    segment_blocked,
)

LANDMARK_DIM = 3
MAX_EPISODE_STEPS = 500
SUCCESS_RADIUS_M = 1.0
MAX_REJECTIONS = 10_000
MIN_FREE_COMPONENT = 200


class Difficulty(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"

    @property
    def band(self) -> tuple[float, float]:
        return DIFFICULTY_BANDS[self]

    def contains(self, distance_m: float) -> bool:
        lo, hi = self.band
        if self is Difficulty.HARD:
            return lo <= distance_m <= hi
        return lo <= distance_m < hi


DIFFICULTY_BANDS = {
    Difficulty.EASY: (1.5, 3.0),
    Difficulty.MEDIUM: (3.0, 5.0),
    Difficulty.HARD: (5.0, 10.0),
}


@dataclass(frozen=True)
class SensorConfig:
    n_rays: int = 36
    max_range_m: float = 5.0
    # dense scan used only for map integration
    scan_rays: int = 360


def grid_dims(width_m: float, height_m: float, cell_size_m: float) -> tuple[int, int]:
    """``(rows, cols)`` for a world of the given extent."""
    cols = math.ceil(width_m / cell_size_m - 1e-9)
    rows = math.ceil(height_m / cell_size_m - 1e-9)
    return rows, cols


def landmark_texture(obstacle_grid: np.ndarray, cell_size_m: float) -> np.ndarray:
    """Smooth position-coded features on occupied cells, zeros elsewhere.

    Derived from the grid alone so a world reloaded from its ASCII file gets
    the same texture back.
    """
    rows, cols = obstacle_grid.shape
    ys = (np.arange(rows) + 0.5) * cell_size_m
    xs = (np.arange(cols) + 0.5) * cell_size_m
    X, Y = np.meshgrid(xs, ys)
    # wavelengths of 8-10 m: no aliasing between distant walls of one world
    waves = (
        (0.7, 0.30, 0.2),
        (0.6, 2.20, 1.9),
        (0.8, 4.10, 3.4),
    )
    feats = np.empty((rows, cols, LANDMARK_DIM))
    for k, (omega, theta, phase) in enumerate(waves):
        feats[..., k] = 0.5 + 0.5 * np.sin(omega * (X * math.cos(theta) + Y * math.sin(theta)) + phase)
    feats[~obstacle_grid] = 0.0
    return feats


@dataclass
class World:
    width_m: float
    height_m: float
    cell_size_m: float
    obstacle_grid: np.ndarray
    landmark_field: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.obstacle_grid = np.ascontiguousarray(self.obstacle_grid, dtype=np.bool_)
        expected = grid_dims(self.width_m, self.height_m, self.cell_size_m)
        if self.obstacle_grid.shape != expected:
            raise InvalidInputError(f"grid shape {self.obstacle_grid.shape} != {expected}")
        g = self.obstacle_grid
        if not (g[0].all() and g[-1].all() and g[:, 0].all() and g[:, -1].all()):
            raise InvalidInputError("world boundary must be occupied")
        if self.landmark_field is None:
            self.landmark_field = landmark_texture(g, self.cell_size_m)
        self.obstacle_grid.flags.writeable = False
        self.landmark_field.flags.writeable = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.obstacle_grid.shape

    def free_cells(self) -> np.ndarray:
        return np.argwhere(~self.obstacle_grid)

    def is_free(self, x: float, y: float) -> bool:
        cell = cell_of(x, y, self.cell_size_m)
        return in_bounds(self.obstacle_grid, cell) and not self.obstacle_grid[cell]

    def largest_free_component(self) -> int:
        labels, n = ndimage.label(~self.obstacle_grid)
        if n == 0:
            return 0
        return int(np.bincount(labels.ravel())[1:].max())


def validate_pose(world: World, pose: Pose) -> None:
    if not (math.isfinite(pose.x) and math.isfinite(pose.y)) or not world.is_free(pose.x, pose.y):
        raise InvalidInputError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is not in a free cell")


def step(world: World, pose: Pose, action: Action, motion: MotionConfig = MotionConfig()) -> tuple[Pose, bool]:
    """Apply one discrete action. Returns ``(new_pose, collided)``."""
    validate_pose(world, pose)
    action = Action(action)
    if action == Action.STOP:
        return pose, False
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, normalize_heading(pose.heading + motion.turn_rad)), False
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, normalize_heading(pose.heading - motion.turn_rad)), False
    end = forward_target(pose, motion)
    if segment_blocked(world.obstacle_grid, world.cell_size_m, (pose.x, pose.y), end, motion.agent_radius_m):
        return pose, True
    return Pose(end[0], end[1], pose.heading), False


@njit(cache=True)
def _dir(angle):
    dx = math.cos(angle)
    dy = math.sin(angle)
    if abs(dx) < 1e-12:
        dx = 0.0
    if abs(dy) < 1e-12:
        dy = 0.0
    return dx, dy


@njit(cache=True)
def cast_ray(grid, h, x, y, angle, max_range):
    """Amanatides-Woo traversal. Returns ``(distance, hit_row, hit_col)``.

    The hit cell is ``(-1, -1)`` when nothing is struck within ``max_range``.
    """
    rows, cols = grid.shape
    dx, dy = _dir(angle)
    r = int(math.floor(y / h))
    c = int(math.floor(x / h))
    if dx > 0:
        step_c, t_max_x, t_dx = 1, ((c + 1) * h - x) / dx, h / dx
    elif dx < 0:
        step_c, t_max_x, t_dx = -1, (c * h - x) / dx, -h / dx
    else:
        step_c, t_max_x, t_dx = 0, np.inf, np.inf
    if dy > 0:
        step_r, t_max_y, t_dy = 1, ((r + 1) * h - y) / dy, h / dy
    elif dy < 0:
        step_r, t_max_y, t_dy = -1, (r * h - y) / dy, -h / dy
    else:
        step_r, t_max_y, t_dy = 0, np.inf, np.inf
    while True:
        if t_max_x < t_max_y:
            c += step_c
            t = t_max_x
            t_max_x += t_dx
        else:
            r += step_r
            t = t_max_y
            t_max_y += t_dy
        if t >= max_range:
            return max_range, -1, -1
        if r < 0 or r >= rows or c < 0 or c >= cols:
            return t, -1, -1
        if grid[r, c]:
            return t, r, c


@njit(cache=True)
def _render(grid, landmarks, h, x, y, n_rays, max_range):
    ranges = np.empty(n_rays)
    hits = np.zeros((n_rays, landmarks.shape[2]))
    for i in range(n_rays):
        angle = 2.0 * math.pi * i / n_rays
        t, r, c = cast_ray(grid, h, x, y, angle, max_range)
        ranges[i] = max(t, 1e-6)
        if r >= 0:
            hits[i] = landmarks[r, c]
    return ranges, hits


@dataclass
class Panorama:
    """World-frame range + landmark ring; ray ``i`` points at ``2*pi*i/n``."""

    ranges: np.ndarray
    landmark_hits: np.ndarray
    max_range_m: float = 5.0

    @property
    def n_rays(self) -> int:
        return len(self.ranges)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.ranges / self.max_range_m, self.landmark_hits.ravel()])

    def to_json(self) -> dict:
        return {
            "ranges": self.ranges.tolist(),
            "landmark_hits": self.landmark_hits.tolist(),
            "max_range_m": self.max_range_m,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Panorama":
        return cls(np.asarray(d["ranges"], float), np.asarray(d["landmark_hits"], float), float(d["max_range_m"]))


def render_panorama(world: World, pose: Pose, sensor: SensorConfig = SensorConfig(), n_rays: int | None = None) -> Panorama:
    validate_pose(world, pose)
    n = sensor.n_rays if n_rays is None else int(n_rays)
    ranges, hits = _render(
        world.obstacle_grid, world.landmark_field, world.cell_size_m,
        float(pose.x), float(pose.y), n, float(sensor.max_range_m),
    )
    return Panorama(ranges, hits, float(sensor.max_range_m))


@dataclass
class NavTask:
    start_pose: Pose
    goal_pose: Pose
    goal_panorama: Panorama
    difficulty: Difficulty
    shortest_path_m: float

    def to_json(self) -> dict:
        return {
            "start": [self.start_pose.x, self.start_pose.y, self.start_pose.heading],
            "goal": [self.goal_pose.x, self.goal_pose.y, self.goal_pose.heading],
            "difficulty": self.difficulty.value,
            "shortest_path_m": self.shortest_path_m,
        }


def _cell_pose(cell, world: World, heading: float) -> Pose:
    x, y = cell_center(tuple(int(v) for v in cell), world.cell_size_m)
    return Pose(x, y, heading)


def sample_task(
    world: World,
    difficulty: Difficulty | str,
    rng: np.random.Generator,
    sensor: SensorConfig = SensorConfig(),
    goals_per_start: int = 25,
) -> NavTask:
    """Rejection-sample a start/goal pair whose geodesic distance fits the tier.

    Each start costs one eikonal solve; up to ``goals_per_start`` goals are
    tried against it before a new start is drawn.  Every miss counts toward
    the 10,000 rejection budget.
    """
    difficulty = Difficulty(difficulty)
    free = world.free_cells()
    if len(free) < 2:
        raise UnsatisfiableTierError("world has fewer than two free cells")
    rejections = 0
    while rejections < MAX_REJECTIONS:
        start = free[rng.integers(len(free))]
        dist = fmm.solve_eikonal(world.obstacle_grid, tuple(start), world.cell_size_m).value
        for _ in range(goals_per_start):
            goal = free[rng.integers(len(free))]
            d = float(dist[tuple(goal)])
            if math.isfinite(d) and difficulty.contains(d):
                start_pose = _cell_pose(start, world, rng.integers(4) * math.pi / 2)
                goal_pose = _cell_pose(goal, world, rng.integers(4) * math.pi / 2)
                return NavTask(
                    start_pose=Pose(start_pose.x, start_pose.y, normalize_heading(start_pose.heading)),
                    goal_pose=Pose(goal_pose.x, goal_pose.y, normalize_heading(goal_pose.heading)),
                    goal_panorama=render_panorama(world, goal_pose, sensor),
                    difficulty=difficulty,
                    shortest_path_m=d,
                )
            rejections += 1
            if rejections >= MAX_REJECTIONS:
                break
    raise UnsatisfiableTierError(f"no {difficulty.value} task after {MAX_REJECTIONS} rejections")


def judge_success(
    agent_pose: Pose,
    goal_pose: Pose,
    stopped: bool,
    steps: int,
    max_steps: int = MAX_EPISODE_STEPS,
    radius_m: float = SUCCESS_RADIUS_M,
) -> bool:
    if steps > max_steps:
        raise InvalidInputError(f"steps {steps} exceeds the {max_steps}-step cap")
    return bool(stopped and steps < max_steps and agent_pose.distance_to(goal_pose) <= radius_m)


# ---------------------------------------------------------------- generation


@dataclass(frozen=True)
class WorldGenConfig:
    width_m: float = 8.0
    height_m: float = 8.0
    cell_size_m: float = 0.10
    min_room_m: float = 2.2
    door_m: tuple[float, float] = (0.8, 1.2)
    furniture_per_room: tuple[int, int] = (0, 2)
    furniture_m: tuple[float, float] = (0.3, 0.8)
    # free margin kept around furniture so every passage admits the agent
    clearance_m: float = 0.45


def _wall_ok(door_mask, cells, margin):
    """A wall may not end within ``margin`` cells of an existing doorway."""
    rows, cols = door_mask.shape
    for r, c in cells:
        lo_r, hi_r = max(r - margin, 0), min(r + margin + 1, rows)
        lo_c, hi_c = max(c - margin, 0), min(c + margin + 1, cols)
        if door_mask[lo_r:hi_r, lo_c:hi_c].any():
            return False
    return True


def _split_rooms(rng, box, min_cells, grid, door_mask, door_cells, margin):
    r0, c0, r1, c1 = box  # inclusive interior bounds
    h = r1 - r0 + 1
    w = c1 - c0 + 1
    horizontal_opts = [
        wr for wr in range(r0 + min_cells, r1 - min_cells + 1)
        if _wall_ok(door_mask, [(wr, c0 - 1), (wr, c1 + 1)], margin)
    ]
    vertical_opts = [
        wc for wc in range(c0 + min_cells, c1 - min_cells + 1)
        if _wall_ok(door_mask, [(r0 - 1, wc), (r1 + 1, wc)], margin)
    ]
    if not (horizontal_opts or vertical_opts):
        return [box]
    if horizontal_opts and vertical_opts:
        horizontal = rng.random() < h / (h + w)
    else:
        horizontal = bool(horizontal_opts)
    dw = int(rng.integers(door_cells[0], door_cells[1] + 1))
    if horizontal:
        wr = horizontal_opts[int(rng.integers(len(horizontal_opts)))]
        dw = min(dw, w - 2)
        ds = int(rng.integers(c0 + 1, c1 - dw + 1))
        grid[wr, c0:c1 + 1] = True
        grid[wr, ds:ds + dw] = False
        door_mask[wr, ds:ds + dw] = True
        a = (r0, c0, wr - 1, c1)
        b = (wr + 1, c0, r1, c1)
    else:
        wc = vertical_opts[int(rng.integers(len(vertical_opts)))]
        dw = min(dw, h - 2)
        ds = int(rng.integers(r0 + 1, r1 - dw + 1))
        grid[r0:r1 + 1, wc] = True
        grid[ds:ds + dw, wc] = False
        door_mask[ds:ds + dw, wc] = True
        a = (r0, c0, r1, wc - 1)
        b = (r0, wc + 1, r1, c1)
    return (_split_rooms(rng, a, min_cells, grid, door_mask, door_cells, margin)
            + _split_rooms(rng, b, min_cells, grid, door_mask, door_cells, margin))


def generate_world(seed: int, config: WorldGenConfig = WorldGenConfig()) -> World:
    """Rooms-and-corridors layout with scattered rectangular furniture."""
    rng = np.random.default_rng(seed)
    h = config.cell_size_m
    rows, cols = grid_dims(config.width_m, config.height_m, h)
    grid = np.zeros((rows, cols), bool)
    grid[0, :] = grid[-1, :] = grid[:, 0] = grid[:, -1] = True
    min_cells = int(round(config.min_room_m / h))
    door_cells = (int(round(config.door_m[0] / h)), int(round(config.door_m[1] / h)))
    clear = int(math.ceil(config.clearance_m / h))
    door_mask = np.zeros_like(grid)
    rooms = _split_rooms(rng, (1, 1, rows - 2, cols - 2), min_cells, grid, door_mask, door_cells, clear)
    f_lo, f_hi = (int(round(v / h)) for v in config.furniture_m)
    for r0, c0, r1, c1 in rooms:
        for _ in range(int(rng.integers(config.furniture_per_room[0], config.furniture_per_room[1] + 1))):
            for _attempt in range(20):
                fh = int(rng.integers(f_lo, f_hi + 1))
                fw = int(rng.integers(f_lo, f_hi + 1))
                lo_r, hi_r = r0 + clear, r1 - clear - fh + 1
                lo_c, hi_c = c0 + clear, c1 - clear - fw + 1
                if hi_r <= lo_r or hi_c <= lo_c:
                    break
                fr = int(rng.integers(lo_r, hi_r))
                fc = int(rng.integers(lo_c, hi_c))
                window = grid[fr - clear:fr + fh + clear, fc - clear:fc + fw + clear]
                if window.any():
                    continue
                grid[fr:fr + fh, fc:fc + fw] = True
                break
    world = World(config.width_m, config.height_m, h, grid)
    if ndimage.label(~grid)[1] != 1 or world.largest_free_component() < MIN_FREE_COMPONENT:
        raise InvalidInputError(f"seed {seed} produced no free component of {MIN_FREE_COMPONENT} cells")
    return world


# ---------------------------------------------------------------- file format


def dumps_world(world: World) -> str:
    rows, cols = world.shape
    lines = [f"cells {cols} {rows} {world.cell_size_m!r}"]
    for r in range(rows):
        lines.append("".join("#" if v else "." for v in world.obstacle_grid[r]))
    return "\n".join(lines) + "\n"


def loads_world(text: str) -> World:
    lines = text.splitlines()
    if not lines:
        raise InvalidInputError("empty world file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "cells":
        raise InvalidInputError(f"bad world header: {lines[0]!r}")
    cols, rows, cs = int(head[1]), int(head[2]), float(head[3])
    body = lines[1:1 + rows]
    if len(body) != rows or any(len(line) != cols or set(line) - {"#", "."} for line in body):
        raise InvalidInputError("world body does not match header")
    grid = np.array([[ch == "#" for ch in line] for line in body], dtype=bool)
    return World(cols * cs, rows * cs, cs, grid)


def save_world(world: World, path) -> None:
    Path(path).write_text(dumps_world(world))


def load_world(path) -> World:
    return loads_world(Path(path).read_text())
