"""Rule-based closed-loop evaluation.

A planned trajectory is rolled out kinematically (cubic-spline resampling
at 10 Hz), then scored against the scenario: binary gates for collision,
drivable area, driving direction and traffic lights; graded terms for
progress, time-to-collision headroom and comfort. The two aggregate
scores are

    pdms  = ((5 EP + 5 TTC + 2 C) / 12) * NC * DAC
    epdms = ((5 EP + 5 TTC + 2 HC + 2 LK + 2 EC) / 16) * NC * DAC * DDC * TLC

Every threshold below is a config default, overridable per run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .core import (
    EGO_CENTER_OFFSET,
    EGO_LENGTH,
    EGO_WIDTH,
    HORIZON_S,
    Trajectory,
    EgoState,
)
from .geometry import (
    box_corners,
    boxes_overlap,
    point_in_polygon,
    project_onto_polyline,
    segment_intersects_box,
)


@dataclass
class ScorerConfig:
    dt: float = 0.1
    ttc_horizon: float = 1.0
    accel_limit: float = 4.0  # m/s^2, comfort
    jerk_limit: float = 8.0  # m/s^3, comfort
    lane_keep_limit: float = 0.8  # m lateral offset
    extended_comfort_limit: float = 2.0  # m/s^2 accel change per step
    reverse_limit: float = 0.5  # m of backward route progress
    min_expert_progress: float = 0.1  # m; below this EP defaults to 1
    ego_length: float = EGO_LENGTH
    ego_width: float = EGO_WIDTH
    ego_center_offset: float = EGO_CENTER_OFFSET


@dataclass
class RolloutState:
    time: float
    pose: np.ndarray  # (x, y, heading)
    speed: float
    accel: float
    jerk: float


@dataclass
class Rollout:
    """Array-of-structs view of the 10 Hz resampled motion."""

    time: np.ndarray  # (T,)
    xy: np.ndarray  # (T, 2)
    heading: np.ndarray  # (T,)
    speed: np.ndarray
    accel: np.ndarray
    jerk: np.ndarray

    def __len__(self) -> int:
        return self.time.shape[0]

    def states(self) -> list:
        return [RolloutState(float(self.time[i]),
                             np.array([*self.xy[i], self.heading[i]]),
                             float(self.speed[i]), float(self.accel[i]),
                             float(self.jerk[i]))
                for i in range(len(self))]


def rollout(traj: Trajectory, ego: EgoState, config: ScorerConfig = ScorerConfig()) -> Rollout:
    """Cubic-spline interpolation of (x, y) at config.dt over the 4 s horizon.

    Heading comes from the path tangent (held through zero-length segments),
    speed/accel/jerk from successive finite differences seeded with the ego's
    current speed and acceleration.
    """
    knot_t = np.concatenate([[0.0], Trajectory.times()])
    knot_xy = np.vstack([ego.pose[:2], traj.xy])
    # clamp the start tangent to the ego's instantaneous velocity so the
    # resampled profile is continuous with the current motion; natural end
    v0 = ego.speed * np.array([math.cos(ego.pose[2]), math.sin(ego.pose[2])])
    spline = CubicSpline(knot_t, knot_xy, bc_type=((1, v0), (2, np.zeros(2))))
    t = np.arange(0.0, HORIZON_S + config.dt / 2, config.dt)
    xy = spline(t)
    tangent = spline(t, 1)

    heading = np.empty(len(t))
    prev = float(ego.pose[2])
    for i in range(len(t)):
        if np.hypot(*tangent[i]) > 1e-9:
            prev = math.atan2(tangent[i][1], tangent[i][0])
        heading[i] = prev

    speed = np.empty(len(t))
    speed[0] = ego.speed
    speed[1:] = np.linalg.norm(np.diff(xy, axis=0), axis=1) / config.dt
    accel = np.empty(len(t))
    accel[0] = ego.accel
    accel[1:] = np.diff(speed) / config.dt
    jerk = np.empty(len(t))
    jerk[0] = 0.0
    jerk[1:] = np.diff(accel) / config.dt
    return Rollout(time=t, xy=xy, heading=heading, speed=speed, accel=accel, jerk=jerk)


@dataclass
class Subscores:
    nc: float = 1.0
    dac: float = 1.0
    ep: float = 1.0
    ttc: float = 1.0
    c: float = 1.0
    hc: float = 1.0
    lk: float = 1.0
    ec: float = 1.0
    ddc: float = 1.0
    tlc: float = 1.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"subscore {name}={v} outside [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


def _ego_boxes(ro: Rollout, config: ScorerConfig):
    """Footprint centers/extents/headings for every rollout step."""
    offset = np.stack([np.cos(ro.heading), np.sin(ro.heading)], axis=1)
    centers = ro.xy + config.ego_center_offset * offset
    extents = np.broadcast_to([config.ego_length, config.ego_width], (len(ro), 2))
    return centers, extents, ro.heading


def _collides(centers, extents, headings, agents, times) -> bool:
    """Any ego box vs any constant-velocity agent box at matching times."""
    if not agents:
        return False
    a_centers = np.stack([[a.center_at(t) for a in agents] for t in times])  # (T, A, 2)
    a_extents = np.stack([[a.extent for a in agents]] * len(times))
    a_headings = np.stack([[a.heading for a in agents]] * len(times))
    hit = boxes_overlap(centers[:, None, :], extents[:, None, :], headings[:, None],
                        a_centers, a_extents, a_headings)
    return bool(hit.any())


def _comfort_ok(accel: np.ndarray, jerk: np.ndarray, config: ScorerConfig) -> bool:
    return bool((np.abs(accel) <= config.accel_limit).all()
                and (np.abs(jerk) <= config.jerk_limit).all())


def _history_comfort(history: np.ndarray, config: ScorerConfig) -> float:
    """Comfort test on the recorded 2 Hz ego history poses."""
    if history is None or len(history) < 3:
        return 1.0
    pts = np.asarray(history, dtype=np.float64)[:, :2]
    dt = 0.5
    speeds = np.linalg.norm(np.diff(pts, axis=0), axis=1) / dt
    accels = np.diff(speeds) / dt
    jerks = np.diff(accels) / dt if len(accels) >= 2 else np.zeros(0)
    return 1.0 if _comfort_ok(accels, jerks, config) else 0.0


def subscores(ro: Rollout, scenario, config: ScorerConfig = ScorerConfig()) -> Subscores:
    """All ten subscores for one rollout against its scenario."""
    drivable = np.asarray(scenario.drivable, dtype=np.float64)
    if drivable.ndim != 2 or drivable.shape[0] < 3:
        raise ValueError("scenario drivable area must be a polygon with >= 3 vertices")
    route = np.asarray(scenario.route, dtype=np.float64)
    agents = list(scenario.agents)

    centers, extents, headings = _ego_boxes(ro, config)

    nc = 0.0 if _collides(centers, extents, headings, agents, ro.time) else 1.0

    corners = box_corners(centers, extents, headings)  # (T, 4, 2)
    dac = 1.0 if point_in_polygon(corners.reshape(-1, 2), drivable).all() else 0.0

    s_ego, d_ego = project_onto_polyline(ro.xy, route)
    expert_ro = rollout(scenario.expert, scenario.ego, config)
    s_exp, _ = project_onto_polyline(expert_ro.xy, route)
    expert_progress = float(s_exp[-1] - s_exp[0])
    if expert_progress < config.min_expert_progress:
        ep = 1.0
    else:
        ep = float(np.clip((s_ego[-1] - s_ego[0]) / expert_progress, 0.0, 1.0))

    ttc = 1.0
    if agents:
        taus = np.arange(config.dt, config.ttc_horizon + config.dt / 2, config.dt)
        fwd = np.stack([np.cos(ro.heading), np.sin(ro.heading)], axis=1)
        for tau in taus:
            proj_centers = centers + ro.speed[:, None] * tau * fwd
            if _collides(proj_centers, extents, headings, agents, ro.time + tau):
                ttc = 0.0
                break

    c = 1.0 if _comfort_ok(ro.accel, ro.jerk, config) else 0.0
    hc = _history_comfort(getattr(scenario, "history", None), config)
    lk = 1.0 if (d_ego <= config.lane_keep_limit + 1e-12).all() else 0.0
    ec = 1.0 if len(ro.accel) < 2 or \
        np.abs(np.diff(ro.accel)).max() <= config.extended_comfort_limit else 0.0
    ddc = 1.0 if float((s_ego - s_ego[0]).min()) >= -config.reverse_limit else 0.0

    tlc = 1.0
    stop_line = getattr(scenario, "stop_line", None)
    if stop_line is not None and getattr(scenario, "light_state", "green") == "red":
        seg = np.asarray(stop_line, dtype=np.float64)
        for i in range(len(ro)):
            if segment_intersects_box(seg[0], seg[1], centers[i], extents[i], headings[i]):
                tlc = 0.0
                break

    return Subscores(nc=nc, dac=dac, ep=ep, ttc=ttc, c=c,
                     hc=hc, lk=lk, ec=ec, ddc=ddc, tlc=tlc)


def pdms(s: Subscores) -> float:
    return ((5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.c) / 12.0) * s.nc * s.dac


def epdms(s: Subscores) -> float:
    return ((5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.hc + 2.0 * s.lk + 2.0 * s.ec) / 16.0) \
        * s.nc * s.dac * s.ddc * s.tlc


@dataclass
class ScoreRecord:
    scenario_id: str
    subscores: Subscores
    pdms: float
    epdms: float

    def as_dict(self) -> dict:
        doc = {"scenario_id": self.scenario_id}
        doc.update(self.subscores.as_dict())
        doc["pdms"] = self.pdms
        doc["epdms"] = self.epdms
        return doc


def score_trajectory(traj: Trajectory, scenario,
                     config: ScorerConfig = ScorerConfig()) -> ScoreRecord:
    ro = rollout(traj, scenario.ego, config)
    s = subscores(ro, scenario, config)
    return ScoreRecord(scenario_id=scenario.id, subscores=s,
                       pdms=pdms(s), epdms=epdms(s))


def aggregate(records: Sequence[ScoreRecord]) -> dict:
    """Arithmetic means of scores and subscores.

    Mean PDMS is reported alongside the formula applied to mean subscores;
    the two differ in general because the metric is nonlinear, so both
    numbers appear explicitly in the footer.
    """
    if not records:
        raise ValueError("aggregate: no score records")
    mean_sub = {k: float(np.mean([r.subscores.as_dict()[k] for r in records]))
                for k in records[0].subscores.as_dict()}
    mean_pdms = float(np.mean([r.pdms for r in records]))
    mean_epdms = float(np.mean([r.epdms for r in records]))
    formula_of_means = ((5 * mean_sub["ep"] + 5 * mean_sub["ttc"] + 2 * mean_sub["c"]) / 12
                        * mean_sub["nc"] * mean_sub["dac"])
    return {
        "count": len(records),
        "mean_pdms": mean_pdms,
        "mean_epdms": mean_epdms,
        "mean_subscores": mean_sub,
        "pdms_of_mean_subscores": formula_of_means,
        "note": "mean of per-scenario PDMS; the formula applied to mean "
                "subscores is reported separately and generally differs",
    }
