"""Online occupancy / exploration map built from noiseless poses and scans."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

from .geometry import Pose, cell_of, in_bounds
from .gridworld import Panorama, _dir

CHANNEL_NAMES = ("obstacle", "explored", "current", "past")


@njit(cache=True)
def _integrate(obstacle, explored, h, x, y, ranges, max_range):
    rows, cols = obstacle.shape
    n = ranges.shape[0]
    r0 = int(math.floor(y / h))
    c0 = int(math.floor(x / h))
    explored[r0, c0] = True
    for i in range(n):
        dx, dy = _dir(2.0 * math.pi * i / n)
        rng = ranges[i]
        r, c = r0, c0
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
            if r < 0 or r >= rows or c < 0 or c >= cols:
                break
            if t >= rng:
                # the cell entered at the reported range is the struck one,
                # unless the ray crosses a cell corner there: then either
                # of the two cells entered could be it, so mark neither
                corner = min(t_max_x, t_max_y) <= rng + 1e-9
                if rng < max_range and t <= rng + 1e-9 and not corner:
                    obstacle[r, c] = True
                    explored[r, c] = True
                break
            explored[r, c] = True


@dataclass
class OccupancyMap:
    obstacle: np.ndarray
    explored: np.ndarray
    visit_count: np.ndarray
    cell_size_m: float
    agent_cell: tuple[int, int] | None = None

    @classmethod
    def empty(cls, shape: tuple[int, int], cell_size_m: float) -> "OccupancyMap":
        return cls(
            obstacle=np.zeros(shape, bool),
            explored=np.zeros(shape, bool),
            visit_count=np.zeros(shape, np.int64),
            cell_size_m=float(cell_size_m),
        )

    @property
    def shape(self) -> tuple[int, int]:
        return self.obstacle.shape

    def copy(self) -> "OccupancyMap":
        return OccupancyMap(
            self.obstacle.copy(), self.explored.copy(), self.visit_count.copy(),
            self.cell_size_m, self.agent_cell,
        )


def integrate_scan(omap: OccupancyMap, pose: Pose, panorama: Panorama) -> OccupancyMap:
    """Fold one scan into the map in place (and return it).

    Cells a ray passes through become explored; the struck cell becomes an
    explored obstacle.  Obstacle marks are never cleared.
    """
    cell = cell_of(pose.x, pose.y, omap.cell_size_m)
    _integrate(
        omap.obstacle, omap.explored, omap.cell_size_m, float(pose.x), float(pose.y),
        np.ascontiguousarray(panorama.ranges, dtype=float), float(panorama.max_range_m),
    )
    omap.visit_count[cell] += 1
    omap.agent_cell = cell
    return omap


def explored_area(omap: OccupancyMap) -> float:
    """Explored area in square meters."""
    h = omap.cell_size_m
    return int(np.count_nonzero(omap.explored)) * h * h


@dataclass
class ChannelMap:
    planes: np.ndarray  # (4, rows, cols), values in {0, 1}
    names: tuple[str, ...] = field(default=CHANNEL_NAMES)

    def plane(self, name: str) -> np.ndarray:
        return self.planes[self.names.index(name)]


def location_disk(shape: tuple[int, int], cell: tuple[int, int], radius: int = 1) -> np.ndarray:
    rows, cols = np.indices(shape)
    return ((rows - cell[0]) ** 2 + (cols - cell[1]) ** 2) <= radius * radius


def assemble_channels(omap: OccupancyMap, pose: Pose) -> ChannelMap:
    cell = cell_of(pose.x, pose.y, omap.cell_size_m)
    planes = np.stack([
        omap.obstacle.astype(float),
        omap.explored.astype(float),
        location_disk(omap.shape, cell).astype(float),
        (omap.visit_count > 0).astype(float),
    ])
    return ChannelMap(planes)


def known_reachable_mask(omap: OccupancyMap, agent_cell: tuple[int, int] | None = None) -> np.ndarray:
    """Explored free cells 4-connected to the agent through explored free cells."""
    agent = omap.agent_cell if agent_cell is None else agent_cell
    known_free = omap.explored & ~omap.obstacle
    if agent is None or not in_bounds(known_free, agent) or not known_free[agent]:
        return np.zeros(omap.shape, bool)
    labels, _ = ndimage.label(known_free)
    return labels == labels[agent]


def is_known_reachable(omap: OccupancyMap, cell: tuple[int, int], agent_cell: tuple[int, int] | None = None) -> bool:
    return bool(known_reachable_mask(omap, agent_cell)[tuple(cell)])


def write_pgm(path, plane: np.ndarray, maxval: int = 255) -> None:
    """Plain (P2) graymap; finite values are scaled to ``[0, maxval]``, +inf -> maxval."""
    data = np.asarray(plane, dtype=float)
    finite = np.isfinite(data)
    top = data[finite].max() if finite.any() else 1.0
    scaled = np.full(data.shape, maxval, dtype=int)
    if top > 0:
        scaled[finite] = np.rint(data[finite] / top * maxval).astype(int)
    else:
        scaled[finite] = 0
    rows, cols = data.shape
    lines = ["P2", f"{cols} {rows}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    cols, rows = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + rows * cols], dtype=int).reshape(rows, cols)


def export_channels(omap: OccupancyMap, pose: Pose, directory, prefix: str = "map") -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    channels = assemble_channels(omap, pose)
    paths = []
    for name, plane in zip(channels.names, channels.planes):
        p = out / f"{prefix}_{name}.pgm"
        write_pgm(p, plane)
        paths.append(p)
    return paths
