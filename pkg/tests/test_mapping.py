import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from conftest import boxed
from imgnav.geometry import Action, Pose, cell_of
from imgnav.gridworld import Panorama, SensorConfig, World, render_panorama, step
from imgnav.mapping import (
    CHANNEL_NAMES,
    OccupancyMap,
    assemble_channels,
    explored_area,
    export_channels,
    integrate_scan,
    is_known_reachable,
    known_reachable_mask,
    location_disk,
    read_pgm,
    write_pgm,
)


def _scan(world, pose, n=360):
    return render_panorama(world, pose, SensorConfig(), n_rays=n)


def test_fresh_map_area_zero():
    assert explored_area(OccupancyMap.empty((10, 10), 0.1)) == 0.0


def test_area_arithmetic():
    m = OccupancyMap.empty((20, 20), 0.1)
    m.explored.flat[:120] = True
    assert explored_area(m) == pytest.approx(1.2)


def test_single_ray_hit():
    g = boxed(40, 40)
    g[:, 30] = True  # face at x = 3.0
    w = World(4.0, 4.0, 0.1, g)
    pose = Pose(2.05, 2.05)
    m = OccupancyMap.empty(w.shape, 0.1)
    pano = Panorama(np.array([0.95]), np.zeros((1, 3)), 5.0)
    integrate_scan(m, pose, pano)
    assert m.obstacle[20, 30]
    assert m.obstacle.sum() == 1
    assert m.explored[20, 20:31].all()
    assert m.explored.sum() == 11
    assert m.visit_count[20, 20] == 1


def test_max_range_ray_marks_no_obstacle():
    m = OccupancyMap.empty((120, 120), 0.1)
    pano = Panorama(np.array([5.0]), np.zeros((1, 3)), 5.0)
    integrate_scan(m, Pose(2.05, 6.05), pano)
    assert not m.obstacle.any()
    assert m.explored[60, 20:70].all()


def test_integrate_idempotent_apart_from_visits(house):
    free = house.free_cells()[300]
    pose = Pose((free[1] + 0.5) * 0.1, (free[0] + 0.5) * 0.1)
    scan = _scan(house, pose)
    m = OccupancyMap.empty(house.shape, 0.1)
    integrate_scan(m, pose, scan)
    obs, exp = m.obstacle.copy(), m.explored.copy()
    integrate_scan(m, pose, scan)
    np.testing.assert_array_equal(obs, m.obstacle)
    np.testing.assert_array_equal(exp, m.explored)
    assert m.visit_count[cell_of(pose.x, pose.y, 0.1)] == 2


@settings(max_examples=15, deadline=None)
@given(st.lists(st.sampled_from([Action.MOVE_FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT]), min_size=5, max_size=80))
def test_random_walk_map_soundness_and_monotonicity(house, actions):
    free = house.free_cells()
    r, c = free[len(free) // 3]
    pose = Pose((c + 0.5) * 0.1, (r + 0.5) * 0.1)
    m = OccupancyMap.empty(house.shape, 0.1)
    area = 0.0
    for a in actions:
        integrate_scan(m, pose, _scan(house, pose))
        assert explored_area(m) >= area
        area = explored_area(m)
        assert np.all(house.obstacle_grid[m.obstacle])  # no false obstacles
        assert np.all(m.explored[m.obstacle])
        assert m.visit_count[cell_of(pose.x, pose.y, 0.1)] >= 1
        pose, _ = step(house, pose, a)


def test_closed_room_sweep_matches_ground_truth():
    g = boxed(30, 30)
    g[10:13, 10:13] = True
    w = World(3.0, 3.0, 0.1, g)
    m = OccupancyMap.empty(w.shape, 0.1)
    for x, y in [(0.55, 0.55), (2.45, 0.55), (0.55, 2.45), (2.45, 2.45), (1.5, 0.55), (0.55, 1.5)]:
        integrate_scan(m, Pose(x, y), _scan(w, Pose(x, y)))
    np.testing.assert_array_equal(m.obstacle, g & m.explored)


def test_channels(house):
    m = OccupancyMap.empty(house.shape, 0.1)
    free = house.free_cells()[500]
    pose = Pose((free[1] + 0.5) * 0.1, (free[0] + 0.5) * 0.1)
    ch = assemble_channels(m, pose)
    assert ch.names == CHANNEL_NAMES
    assert not ch.plane("obstacle").any()
    assert ch.plane("current").sum() == location_disk(m.shape, tuple(free)).sum() == 5
    integrate_scan(m, pose, _scan(house, pose))
    for _ in range(5):
        integrate_scan(m, pose, _scan(house, pose))
    ch = assemble_channels(m, pose)
    assert np.all(ch.plane("obstacle") <= ch.plane("explored"))
    assert ndimage.label(ch.plane("past"))[1] == 1
    assert set(np.unique(ch.planes)) <= {0.0, 1.0}


def test_known_reachability(house):
    g = boxed(30, 30)
    g[:, 15] = True
    w = World(3.0, 3.0, 0.1, g)
    pose = Pose(0.55, 1.55)
    m = OccupancyMap.empty(w.shape, 0.1)
    integrate_scan(m, pose, _scan(w, pose))
    agent = cell_of(pose.x, pose.y, 0.1)
    assert is_known_reachable(m, agent)
    assert not is_known_reachable(m, (15, 15))
    assert not is_known_reachable(m, (15, 20))  # sealed behind the wall
    mask = known_reachable_mask(m)
    labels, _ = ndimage.label(m.explored & ~m.obstacle)
    np.testing.assert_array_equal(mask, labels == labels[agent])


def test_pgm_roundtrip(tmp_path):
    plane = np.array([[0.0, 1.0], [0.5, np.inf]])
    write_pgm(tmp_path / "a.pgm", plane)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), [[0, 255], [128, 255]])


def test_export_channels(tmp_path, house):
    m = OccupancyMap.empty(house.shape, 0.1)
    free = house.free_cells()[0]
    pose = Pose((free[1] + 0.5) * 0.1, (free[0] + 0.5) * 0.1)
    integrate_scan(m, pose, _scan(house, pose))
    paths = export_channels(m, pose, tmp_path)
    assert [p.name for p in paths] == [f"map_{n}.pgm" for n in CHANNEL_NAMES]
    np.testing.assert_array_equal(read_pgm(paths[0]) > 0, m.obstacle)
