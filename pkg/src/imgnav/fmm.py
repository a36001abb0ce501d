"""Fast Marching eikonal solver, path descent and per-step replanning.

The solver is first order on the 4-neighbour stencil with unit speed.  Cells
are accepted from a binary min-heap keyed on ``(value, row-major index)`` so
ties resolve the same way on every run.  Cells in a small visible disk around
the source are seeded with their exact Euclidean distance; this removes the
point-source error that a bare first-order march carries along diagonals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InternalInconsistencyError, InvalidInputError, NoPathError
from .geometry import (
    Action,
    MotionConfig,
    Pose,
    angle_diff,
    cell_center,
    cell_of,
    forward_target,
    in_bounds,
    normalize_heading,
    segment_blocked,
)
from .geometry import SWEEP_EPS, _segment_blocked

_FIXED = 1
# cells within this many cells of the source (and in line of sight) start
# from the exact Euclidean distance
SOURCE_INIT_RADIUS = 2.5
_ACCEPTED = 2


@dataclass
class DistanceField:
    value: np.ndarray
    source_cell: tuple[int, int]
    cell_size_m: float

    def at(self, cell: tuple[int, int]) -> float:
        return float(self.value[cell])


@njit(cache=True, inline="always")
def _less(k1, i1, k2, i2):
    return k1 < k2 or (k1 == k2 and i1 < i2)


@njit(cache=True)
def _heap_push(keys, ids, n, k, i):
    pos = n
    keys[pos] = k
    ids[pos] = i
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(keys[pos], ids[pos], keys[parent], ids[parent]):
            keys[pos], keys[parent] = keys[parent], keys[pos]
            ids[pos], ids[parent] = ids[parent], ids[pos]
            pos = parent
        else:
            break
    return n + 1


@njit(cache=True)
def _heap_pop(keys, ids, n):
    k0 = keys[0]
    i0 = ids[0]
    n -= 1
    keys[0] = keys[n]
    ids[0] = ids[n]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= n:
            break
        best = left
        right = left + 1
        if right < n and _less(keys[right], ids[right], keys[left], ids[left]):
            best = right
        if _less(keys[best], ids[best], keys[pos], ids[pos]):
            keys[pos], keys[best] = keys[best], keys[pos]
            ids[pos], ids[best] = ids[best], ids[pos]
            pos = best
        else:
            break
    return k0, i0, n


@njit(cache=True)
def quadratic_update(a, b, h):
    """Upwind update from the smaller x- and y-neighbour values ``a``, ``b``."""
    if a > b:
        a, b = b, a
    if b - a >= h:
        return a + h
    return 0.5 * (a + b + math.sqrt(2.0 * h * h - (a - b) * (a - b)))


@njit(cache=True)
def _fmm(blocked, sr, sc, h, stop_idx, init_radius):
    rows, cols = blocked.shape
    value = np.full((rows, cols), np.inf)
    state = np.zeros((rows, cols), np.uint8)
    cap = 4 * rows * cols + 4
    keys = np.empty(cap)
    ids = np.empty(cap, np.int64)
    n = 0
    # exact distances in a small visible disk around the source
    reach = int(init_radius)
    x0 = (sc + 0.5) * h
    y0 = (sr + 0.5) * h
    for r in range(max(0, sr - reach), min(rows, sr + reach + 1)):
        for c in range(max(0, sc - reach), min(cols, sc + reach + 1)):
            d = math.hypot(r - sr, c - sc)
            if blocked[r, c] or d > init_radius:
                continue
            if d > 0.0 and _segment_blocked(blocked, h, x0, y0, (c + 0.5) * h, (r + 0.5) * h, 0.0):
                continue
            value[r, c] = d * h
            state[r, c] = _FIXED
            n = _heap_push(keys, ids, n, d * h, r * cols + c)
    dr = (-1, 1, 0, 0)
    dc = (0, 0, -1, 1)
    while n > 0:
        k, idx, n = _heap_pop(keys, ids, n)
        r = idx // cols
        c = idx - r * cols
        if state[r, c] == _ACCEPTED or k > value[r, c]:
            continue
        state[r, c] = _ACCEPTED
        if idx == stop_idx:
            break
        for q in range(4):
            nr = r + dr[q]
            nc = c + dc[q]
            if nr < 0 or nr >= rows or nc < 0 or nc >= cols:
                continue
            if blocked[nr, nc] or state[nr, nc] != 0:
                continue
            ux = np.inf
            if nc > 0 and state[nr, nc - 1] == _ACCEPTED:
                ux = value[nr, nc - 1]
            if nc < cols - 1 and state[nr, nc + 1] == _ACCEPTED:
                ux = min(ux, value[nr, nc + 1])
            uy = np.inf
            if nr > 0 and state[nr - 1, nc] == _ACCEPTED:
                uy = value[nr - 1, nc]
            if nr < rows - 1 and state[nr + 1, nc] == _ACCEPTED:
                uy = min(uy, value[nr + 1, nc])
            u = quadratic_update(ux, uy, h)
            if u < value[nr, nc]:
                value[nr, nc] = u
                n = _heap_push(keys, ids, n, u, nr * cols + nc)
    if stop_idx >= 0:
        for r in range(rows):
            for c in range(cols):
                if state[r, c] != _ACCEPTED:
                    value[r, c] = np.inf
    return value


def solve_eikonal(
    obstacle_grid: np.ndarray,
    source_cell: tuple[int, int],
    cell_size_m: float,
    stop_cell: tuple[int, int] | None = None,
    init_radius: float = SOURCE_INIT_RADIUS,
) -> DistanceField:
    """Geodesic travel distance in meters from ``source_cell``.

    Occupied cells stay at +inf.  Anything not marked occupied is traversable,
    so unknown space in a partial map is planned through optimistically.

    With ``stop_cell`` the march ends once that cell is accepted and every
    cell not yet accepted is left at +inf.  Accepted values are identical to a
    full solve, which is all a descent from ``stop_cell`` ever reads.
    """
    grid = np.ascontiguousarray(obstacle_grid, dtype=np.bool_)
    source = (int(source_cell[0]), int(source_cell[1]))
    if not in_bounds(grid, source):
        raise InvalidInputError(f"source cell {source} outside grid {grid.shape}")
    if grid[source]:
        raise InvalidInputError(f"source cell {source} is occupied")
    stop_idx = -1
    if stop_cell is not None:
        stop_idx = int(stop_cell[0]) * grid.shape[1] + int(stop_cell[1])
    value = _fmm(grid, source[0], source[1], float(cell_size_m), stop_idx, float(init_radius))
    return DistanceField(value=value, source_cell=source, cell_size_m=float(cell_size_m))


@njit(cache=True)
def _descend(value, sr, sc):
    rows, cols = value.shape
    out = np.empty((rows * cols, 2), np.int64)
    n = 0
    r, c = sr, sc
    out[n, 0] = r
    out[n, 1] = c
    n += 1
    while value[r, c] > 0.0:
        best = value[r, c]
        br = -1
        bc = -1
        for di in range(-1, 2):
            for dj in range(-1, 2):
                if di == 0 and dj == 0:
                    continue
                nr = r + di
                nc = c + dj
                if nr < 0 or nr >= rows or nc < 0 or nc >= cols:
                    continue
                if value[nr, nc] < best:
                    best = value[nr, nc]
                    br = nr
                    bc = nc
        if br < 0:
            return out[:n], False
        r, c = br, bc
        out[n, 0] = r
        out[n, 1] = c
        n += 1
    return out[:n], True


def extract_path(field: DistanceField, start_cell: tuple[int, int]) -> list[tuple[int, int]]:
    """Steepest descent over the 8-neighbourhood from ``start_cell`` to the source."""
    start = (int(start_cell[0]), int(start_cell[1]))
    if not in_bounds(field.value, start):
        raise InvalidInputError(f"start cell {start} outside grid")
    if not math.isfinite(field.value[start]):
        raise NoPathError(f"cell {start} is unreachable from {field.source_cell}")
    cells, ok = _descend(field.value, start[0], start[1])
    if not ok:
        raise InternalInconsistencyError(f"descent stalled at {tuple(cells[-1])}")
    return [(int(r), int(c)) for r, c in cells]


def _turn_toward(heading: float, target: float, turn_rad: float) -> Action | None:
    """Single turn that most reduces the bearing error, or None if aligned."""
    err = abs(angle_diff(target, heading))
    if err <= turn_rad / 2:
        return None
    left = abs(angle_diff(target, heading + turn_rad))
    right = abs(angle_diff(target, heading - turn_rad))
    return Action.TURN_LEFT if left <= right + 1e-12 else Action.TURN_RIGHT


def _lookahead(path, pose: Pose, cell_size_m: float, min_dist: float) -> tuple[float, float]:
    for cell in path:
        x, y = cell_center(cell, cell_size_m)
        if math.hypot(x - pose.x, y - pose.y) > min_dist:
            return x, y
    return cell_center(path[-1], cell_size_m)


def next_action(
    path, pose: Pose, motion: MotionConfig = MotionConfig(), cell_size_m: float = 0.1
) -> Action:
    """Map a cell path to one planner action from MoveForward/TurnRight/TurnLeft."""
    if len(path) == 0:
        raise InvalidInputError("empty path")
    wx, wy = _lookahead(path, pose, cell_size_m, 0.5 * motion.step_m)
    if math.hypot(wx - pose.x, wy - pose.y) < 1e-12:
        return Action.TURN_LEFT
    bearing = math.atan2(wy - pose.y, wx - pose.x)
    turn = _turn_toward(pose.heading, bearing, motion.turn_rad)
    return Action.MOVE_FORWARD if turn is None else turn


def _fallback_target(omap, agent: tuple[int, int], goal: tuple[int, int]) -> tuple[int, int]:
    reach = solve_eikonal(omap.obstacle, agent, omap.cell_size_m).value
    candidates = np.isfinite(reach) & omap.explored & ~omap.obstacle
    if not candidates.any():
        candidates = np.isfinite(reach)
    rows, cols = np.indices(reach.shape)
    d2 = ((rows - goal[0]) ** 2 + (cols - goal[1]) ** 2).astype(float)
    d2[~candidates] = np.inf
    flat = int(np.argmin(d2))
    return divmod(flat, reach.shape[1])


def _heading_candidates(heading: float, turn_rad: float) -> list[float]:
    n = max(1, int(round(2 * math.pi / turn_rad)))
    return [normalize_heading(heading + k * turn_rad) for k in range(n)]


@njit(cache=True)
def _lattice_hops(grid, h, x0, y0, ax, ay, bx, by, step, pad, n, tr, tc):
    """Breadth-first hop counts over the agent's motion lattice.

    Node ``(i, j)`` sits at ``(x0, y0) + step * ((i - n) * a + (j - n) * b)``.
    Nodes whose cell lies within one cell of ``(tr, tc)`` are the sources;
    -1 marks nodes that cannot get there.
    """
    size = 2 * n + 1
    rows, cols = grid.shape
    hops = np.full((size, size), -1, np.int64)
    queue = np.empty(size * size, np.int64)
    tail = 0
    for i in range(size):
        for j in range(size):
            x = x0 + step * ((i - n) * ax + (j - n) * bx)
            y = y0 + step * ((i - n) * ay + (j - n) * by)
            if x < 0.0 or y < 0.0 or x >= cols * h or y >= rows * h:
                continue
            r = int(math.floor(y / h))
            c = int(math.floor(x / h))
            if not grid[r, c] and abs(r - tr) <= 1 and abs(c - tc) <= 1:
                hops[i, j] = 0
                queue[tail] = i * size + j
                tail += 1
    di = (1, -1, 0, 0)
    dj = (0, 0, 1, -1)
    head = 0
    while head < tail:
        k = queue[head]
        head += 1
        i = k // size
        j = k % size
        x = x0 + step * ((i - n) * ax + (j - n) * bx)
        y = y0 + step * ((i - n) * ay + (j - n) * by)
        for m in range(4):
            ni = i + di[m]
            nj = j + dj[m]
            if ni < 0 or nj < 0 or ni >= size or nj >= size or hops[ni, nj] >= 0:
                continue
            nx = x0 + step * ((ni - n) * ax + (nj - n) * bx)
            ny = y0 + step * ((ni - n) * ay + (nj - n) * by)
            if _segment_blocked(grid, h, nx, ny, x, y, pad):
                continue
            hops[ni, nj] = hops[i, j] + 1
            queue[tail] = ni * size + nj
            tail += 1
    return hops


class _Lattice:
    """Hop counts to the target on the lattice the agent can actually visit.

    Only built for quarter turns; other turn angles do not close a lattice.
    """

    def __init__(self, blocked, h: float, pose: Pose, motion: MotionConfig, target: tuple[int, int]):
        self.ok = abs(motion.turn_rad - math.pi / 2) < 1e-9
        if not self.ok:
            return
        self.pose, self.step = pose, motion.step_m
        self.a = forward_target(Pose(0.0, 0.0, pose.heading), MotionConfig(1.0))
        self.b = forward_target(Pose(0.0, 0.0, pose.heading + math.pi / 2), MotionConfig(1.0))
        rows, cols = blocked.shape
        self.n = int(math.ceil(math.hypot(rows * h, cols * h) / motion.step_m)) + 1
        self.hops = _lattice_hops(
            blocked, h, pose.x, pose.y, self.a[0], self.a[1], self.b[0], self.b[1],
            motion.step_m, SWEEP_EPS + motion.agent_radius_m, self.n, target[0], target[1],
        )

    def at(self, x: float, y: float) -> int:
        dx, dy = (x - self.pose.x) / self.step, (y - self.pose.y) / self.step
        i = int(round(dx * self.a[0] + dy * self.a[1])) + self.n
        j = int(round(dx * self.b[0] + dy * self.b[1])) + self.n
        size = 2 * self.n + 1
        return int(self.hops[i, j]) if 0 <= i < size and 0 <= j < size else -1


def _safe_action(
    proposed: Action, field: DistanceField, path, pose: Pose, motion: MotionConfig, blocked
) -> Action:
    """Keep the proposed action unless its forward hop is blocked or non-descending.

    The agent moves on a lattice of ``step_m`` hops, so the chosen heading is
    screened against the known obstacles and the distance field before the
    agent commits to it.  When the target is reachable on that lattice, only
    hops that shorten the lattice route are allowed; this is what carries the
    agent past spots where the cell-level field has no descending hop.  The
    choice depends only on position, which rules out turn-back-and-forth loops.
    """
    h = field.cell_size_m
    here = field.value[cell_of(pose.x, pose.y, h)]
    wx, wy = _lookahead(path, pose, h, 0.5 * motion.step_m)
    bearing = math.atan2(wy - pose.y, wx - pose.x)
    lattice = _Lattice(blocked, h, pose, motion, field.source_cell)
    hops_here = lattice.at(pose.x, pose.y) if lattice.ok else -1
    options = []
    for cand in _heading_candidates(pose.heading, motion.turn_rad):
        probe = Pose(pose.x, pose.y, cand)
        end = forward_target(probe, motion)
        free = not segment_blocked(blocked, h, (pose.x, pose.y), end, motion.agent_radius_m)
        end_value = field.value[cell_of(end[0], end[1], h)] if free else math.inf
        if free and hops_here > 0:
            free = lattice.at(*end) == hops_here - 1
        # absolute angle as the tie-break keeps the choice independent of heading
        options.append((cand, round(cand % (2 * math.pi), 9), free, end_value))
    desired = min(options, key=lambda o: (abs(angle_diff(bearing, o[0])), o[1]))
    ranked = [desired] + sorted((o for o in options if o is not desired), key=lambda o: (o[3], o[1]))
    chosen = next((o for o in ranked if o[2] and o[3] < here), None)
    if chosen is None:
        chosen = next((o for o in ranked if o[2]), None)
    if chosen is None:
        return Action.TURN_LEFT
    if chosen is desired and proposed != Action.MOVE_FORWARD:
        return proposed
    turn = _turn_toward(pose.heading, chosen[0], motion.turn_rad)
    return Action.MOVE_FORWARD if turn is None else turn


def replan_step(omap, pose: Pose, goal_cell: tuple[int, int], motion: MotionConfig = MotionConfig()) -> Action:
    """Solve from the goal on the current map and return the next planner action.

    If the goal is occupied or cut off in the current map, the nearest
    known-free cell reachable from the agent (straight-line distance to the
    goal, lowest row-major index on ties) is used instead.
    """
    h = omap.cell_size_m
    blocked = omap.obstacle
    goal = (int(goal_cell[0]), int(goal_cell[1]))
    if not in_bounds(blocked, goal):
        raise InvalidInputError(f"goal cell {goal} outside map")
    agent = cell_of(pose.x, pose.y, h)
    if not in_bounds(blocked, agent) or blocked[agent]:
        raise InternalInconsistencyError(f"agent cell {agent} is occupied in the map")
    field = None
    if not blocked[goal]:
        field = solve_eikonal(blocked, goal, h, stop_cell=agent)
        if not math.isfinite(field.value[agent]):
            field = None
    if field is None:
        field = solve_eikonal(blocked, _fallback_target(omap, agent, goal), h, stop_cell=agent)
    path = extract_path(field, agent)
    proposed = next_action(path, pose, motion, h)
    return _safe_action(proposed, field, path, pose, motion, blocked)
