import math

import numpy as np
from hypothesis import given, strategies as st

from imgnav.geometry import (
    AGENT_ACTIONS,
    PLANNER_ACTIONS,
    Action,
    MotionConfig,
    Pose,
    angle_diff,
    cell_center,
    cell_of,
    forward_target,
    normalize_heading,
    segment_blocked,
)


def test_action_sets():
    assert Action.STOP not in PLANNER_ACTIONS
    assert set(AGENT_ACTIONS) == set(PLANNER_ACTIONS) | {Action.STOP}


@given(st.floats(-100, 100, allow_nan=False))
def test_normalize_heading_range(h):
    v = normalize_heading(h)
    assert 0.0 <= v < 2 * math.pi


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_angle_diff_range(a, b):
    d = angle_diff(a, b)
    assert -math.pi < d <= math.pi + 1e-12
    assert math.isclose(math.cos(a - b), math.cos(d), abs_tol=1e-9)


def test_cell_of_and_center_roundtrip():
    assert cell_of(0.25, 0.15, 0.1) == (1, 2)
    x, y = cell_center((1, 2), 0.1)
    assert cell_of(x, y, 0.1) == (1, 2)


def test_forward_target_is_exact_on_axes():
    m = MotionConfig()
    assert forward_target(Pose(2.0, 2.0, 0.0), m) == (2.25, 2.0)
    assert forward_target(Pose(2.0, 2.0, math.pi / 2), m) == (2.0, 2.25)
    assert forward_target(Pose(2.0, 2.0, math.pi), m) == (1.75, 2.0)


def test_segment_blocked_touching_counts():
    g = np.zeros((10, 10), bool)
    g[5, 5] = True
    # ends exactly on the occupied cell's boundary
    assert segment_blocked(g, 1.0, (2.5, 5.5), (5.0, 5.5))
    assert not segment_blocked(g, 1.0, (2.5, 5.5), (4.9, 5.5))
    assert segment_blocked(g, 1.0, (5.5, 2.5), (5.5, 7.5))
