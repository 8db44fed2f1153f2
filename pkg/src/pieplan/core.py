"""Shared domain records: trajectories, agents, ego state, driving commands.

Frame convention everywhere: ego frame at the current timestep, x forward,
y left, origin at the rear axle. Trajectories hold 8 waypoints of
(x, y, heading) covering a 4 s horizon at 2 Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

N_WAYPOINTS = 8
HORIZON_S = 4.0
WAYPOINT_DT = 0.5  # 2 Hz

COMMANDS = ("left", "straight", "right")
UNKNOWN_COMMAND = "unknown"
ALL_COMMANDS = COMMANDS + (UNKNOWN_COMMAND,)

EGO_LENGTH = 4.0
EGO_WIDTH = 1.85
# footprint center sits ahead of the rear-axle origin
EGO_CENTER_OFFSET = 1.4


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(theta, dtype=np.float64) + np.pi, 2 * np.pi)
    return -(wrapped - np.pi)


@dataclass
class Trajectory:
    """8 x (x, y, heading) waypoints at t = 0.5 .. 4.0 s."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (N_WAYPOINTS, 3):
            raise ValueError(f"trajectory must be ({N_WAYPOINTS}, 3), got {self.points.shape}")

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def headings(self) -> np.ndarray:
        return self.points[:, 2]

    @staticmethod
    def times() -> np.ndarray:
        return WAYPOINT_DT * np.arange(1, N_WAYPOINTS + 1)

    @staticmethod
    def from_xy(xy: np.ndarray, first_heading: float = 0.0) -> "Trajectory":
        """Attach headings from consecutive waypoint differences; zero-length
        segments hold the previous heading."""
        xy = np.asarray(xy, dtype=np.float64).reshape(N_WAYPOINTS, 2)
        headings = np.empty(N_WAYPOINTS)
        prev = first_heading
        for i in range(N_WAYPOINTS):
            if i < N_WAYPOINTS - 1:
                d = xy[i + 1] - xy[i]
            else:
                d = xy[i] - xy[i - 1]
            if math.hypot(d[0], d[1]) > 1e-9:
                prev = math.atan2(d[1], d[0])
            headings[i] = prev
        return Trajectory(np.column_stack([xy, wrap_angle(headings)]))


@dataclass
class AgentState:
    """Oriented box plus instantaneous velocity."""

    center: np.ndarray  # (2,) m
    extent: np.ndarray  # (length, width) m
    heading: float
    velocity: np.ndarray  # (vx, vy) m/s

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        self.extent = np.asarray(self.extent, dtype=np.float64).reshape(2)
        self.heading = float(self.heading)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)
        if self.extent.min() <= 0:
            raise ValueError(f"agent extent must be positive, got {self.extent}")
        if np.hypot(*self.velocity) > 20.0 + 1e-9:
            raise ValueError("agent speed above the 20 m/s cap")

    def center_at(self, t: float) -> np.ndarray:
        """Constant-velocity extrapolation."""
        return self.center + self.velocity * t


@dataclass
class EgoState:
    pose: np.ndarray  # (x, y, heading); (0, 0, 0) in the ego frame at t=0
    speed: float
    accel: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3)
        self.speed = float(self.speed)
        self.accel = float(self.accel)


def constant_velocity_trajectory(ego: EgoState) -> Trajectory:
    """Straight-line baseline: continue at the current speed and heading."""
    times = Trajectory.times()
    heading = float(ego.pose[2])
    xy = ego.pose[:2] + np.outer(times * ego.speed,
                                 [math.cos(heading), math.sin(heading)])
    pts = np.column_stack([xy, np.full(N_WAYPOINTS, heading)])
    return Trajectory(pts)
