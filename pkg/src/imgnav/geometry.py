"""Poses, discrete actions and grid geometry shared by every module.

Grids are indexed ``[row, col]``; a row spans ``y`` and a column spans ``x``,
so cell ``(r, c)`` covers ``[c*h, (c+1)*h) x [r*h, (r+1)*h)``.  Headings are
measured counter-clockwise from +x; ``TURN_LEFT`` increases the heading.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi
# boundary contact counts as entering a cell
SWEEP_EPS = 1e-9


class Action(enum.IntEnum):
    MOVE_FORWARD = 0
    TURN_RIGHT = 1
    TURN_LEFT = 2
    STOP = 3


PLANNER_ACTIONS = (Action.MOVE_FORWARD, Action.TURN_RIGHT, Action.TURN_LEFT)
AGENT_ACTIONS = PLANNER_ACTIONS + (Action.STOP,)


def normalize_heading(heading: float) -> float:
    """Wrap to ``[0, 2*pi)``, snapping float residue near a full turn to 0."""
    h = math.fmod(heading, TWO_PI)
    if h < 0.0:
        h += TWO_PI
    if TWO_PI - h < 1e-9 or h < 1e-12:
        return 0.0
    return h


def angle_diff(a: float, b: float) -> float:
    """Signed difference ``a - b`` wrapped to ``(-pi, pi]``."""
    d = math.fmod(a - b, TWO_PI)
    if d <= -math.pi:
        d += TWO_PI
    elif d > math.pi:
        d -= TWO_PI
    return d


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float = 0.0

    def distance_to(self, other: "Pose") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class MotionConfig:
    step_m: float = 0.25
    turn_rad: float = math.pi / 2
    agent_radius_m: float = 0.0


def cell_of(x: float, y: float, cell_size_m: float) -> tuple[int, int]:
    return int(math.floor(y / cell_size_m)), int(math.floor(x / cell_size_m))


def cell_center(cell: tuple[int, int], cell_size_m: float) -> tuple[float, float]:
    r, c = cell
    return (c + 0.5) * cell_size_m, (r + 0.5) * cell_size_m


def in_bounds(grid: np.ndarray, cell: tuple[int, int]) -> bool:
    r, c = cell
    return 0 <= r < grid.shape[0] and 0 <= c < grid.shape[1]


@njit(cache=True)
def _segment_blocked(grid, h, x0, y0, x1, y1, pad):
    rows, cols = grid.shape
    xmin = min(x0, x1) - pad
    xmax = max(x0, x1) + pad
    ymin = min(y0, y1) - pad
    ymax = max(y0, y1) + pad
    c_lo = int(math.floor(xmin / h))
    c_hi = int(math.floor(xmax / h))
    r_lo = int(math.floor(ymin / h))
    r_hi = int(math.floor(ymax / h))
    dx = x1 - x0
    dy = y1 - y0
    for r in range(r_lo, r_hi + 1):
        for c in range(c_lo, c_hi + 1):
            outside = r < 0 or r >= rows or c < 0 or c >= cols
            if not outside and not grid[r, c]:
                continue
            # slab test against the padded cell box
            t0 = 0.0
            t1 = 1.0
            hit = True
            for axis in range(2):
                if axis == 0:
                    p, d, lo, hi = x0, dx, c * h - pad, (c + 1) * h + pad
                else:
                    p, d, lo, hi = y0, dy, r * h - pad, (r + 1) * h + pad
                if abs(d) < 1e-15:
                    if p < lo or p > hi:
                        hit = False
                        break
                else:
                    ta = (lo - p) / d
                    tb = (hi - p) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    t0 = max(t0, ta)
                    t1 = min(t1, tb)
                    if t0 > t1:
                        hit = False
                        break
            if hit:
                return True
    return False


def segment_blocked(
    grid: np.ndarray,
    cell_size_m: float,
    start: tuple[float, float],
    end: tuple[float, float],
    radius_m: float = 0.0,
) -> bool:
    """True if the segment touches an occupied (or out-of-bounds) cell."""
    return bool(
        _segment_blocked(
            grid, float(cell_size_m), float(start[0]), float(start[1]),
            float(end[0]), float(end[1]), SWEEP_EPS + float(radius_m),
        )
    )


def _clean(v: float) -> float:
    # keeps axis-aligned motion exactly on its lattice
    if abs(v) < 1e-12:
        return 0.0
    if abs(abs(v) - 1.0) < 1e-12:
        return math.copysign(1.0, v)
    return v


def forward_target(pose: Pose, motion: MotionConfig) -> tuple[float, float]:
    return (
        pose.x + motion.step_m * _clean(math.cos(pose.heading)),
        pose.y + motion.step_m * _clean(math.sin(pose.heading)),
    )
