"""Per-episode agent state shared by policy training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field

from . import fmm
from .geometry import Action, MotionConfig, Pose
from .gridworld import NavTask, Panorama, SensorConfig, World, render_panorama, step
from .mapping import OccupancyMap, integrate_scan


@dataclass
class Navigator:
    """An agent walking one task: true pose, online map and the step log."""

    world: World
    task: NavTask
    motion: MotionConfig = MotionConfig()
    sensor: SensorConfig = SensorConfig()
    pose: Pose = field(init=False)
    omap: OccupancyMap = field(init=False)
    poses: list[Pose] = field(init=False)
    actions: list[Action] = field(init=False)
    collisions: int = 0
    path_length_m: float = 0.0
    stopped: bool = False

    def __post_init__(self):
        self.pose = self.task.start_pose
        self.omap = OccupancyMap.empty(self.world.shape, self.world.cell_size_m)
        self.poses = [self.pose]
        self.actions = []

    @property
    def steps(self) -> int:
        return len(self.actions)

    @property
    def agent_cell(self) -> tuple[int, int]:
        return self.omap.agent_cell

    def observe(self) -> Panorama:
        """Scan densely into the map and return the observation panorama."""
        scan = render_panorama(self.world, self.pose, self.sensor, n_rays=self.sensor.scan_rays)
        integrate_scan(self.omap, self.pose, scan)
        return render_panorama(self.world, self.pose, self.sensor)

    def apply(self, action: Action) -> bool:
        action = Action(action)
        self.actions.append(action)
        if action == Action.STOP:
            self.stopped = True
            self.poses.append(self.pose)
            return False
        new_pose, collided = step(self.world, self.pose, action, self.motion)
        self.path_length_m += self.pose.distance_to(new_pose)
        self.collisions += int(collided)
        self.pose = new_pose
        self.poses.append(new_pose)
        return collided

    def plan_and_step(self, goal_cell: tuple[int, int]) -> Action:
        action = fmm.replan_step(self.omap, self.pose, goal_cell, self.motion)
        self.apply(action)
        return action
