"""Procedural driving scenarios with ground truth and synthetic sensor grids.

Each template builds road geometry in the ego frame (x forward, y left,
origin at the rear axle at t=0), places constant-velocity agents, drives
an expert along the route with pure pursuit and a trapezoidal speed
profile (braking for red stop lines and yielding to crossing agents), and
rasterizes a BEV occupancy/velocity/road grid plus a forward-view image
stand-in. Every scenario is validated by self-scoring the expert
(no collision, drivable-area compliant, full progress) with bounded
retries on fresh sub-seeds.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (
    COMMANDS,
    EGO_CENTER_OFFSET,
    EGO_LENGTH,
    EGO_WIDTH,
    N_WAYPOINTS,
    Trajectory,
    AgentState,
    EgoState,
    UNKNOWN_COMMAND,
    wrap_angle,
)
from .geometry import boxes_overlap, point_in_polygon, project_onto_polyline
from .scoring import ScorerConfig, rollout, subscores

TEMPLATES = ("straight_road", "left_turn", "right_turn", "t_junction", "crosswalk")
DATASET_FORMAT_VERSION = 1

SIM_DT = 0.1
SIM_STEPS = 40  # 4 s horizon


class GenerationError(Exception):
    pass


class DatasetError(Exception):
    pass


@dataclass
class GeneratorConfig:
    lane_half_width: float = 3.5
    v_cruise: float = 10.0
    a_max: float = 2.0
    lookahead: float = 5.0
    max_agents: int = 8
    p_red_light: float = 0.35
    p_unknown_command: float = 0.0
    bev_x_min: float = -20.0
    bev_y_min: float = -40.0
    bev_extent: float = 80.0
    lidar_cell: float = 0.5
    image_rows: int = 16
    image_cols: int = 64
    image_noise: float = 0.05
    placement_attempts: int = 100
    max_subseeds: int = 50

    @property
    def lidar_cells(self) -> int:
        return int(round(self.bev_extent / self.lidar_cell))


@dataclass
class Scenario:
    id: str
    command: str
    ego: EgoState
    agents: list
    drivable: np.ndarray  # (V, 2) polygon
    route: np.ndarray  # (P, 2) centerline
    stop_line: Optional[np.ndarray]  # (2, 2) segment
    light_state: Optional[str]  # "red" | "green" when a stop line exists
    history: np.ndarray  # (4, 3) past poses at 2 Hz, oldest first
    expert: Trajectory
    image_grid: np.ndarray  # (rows, cols, 4) float32
    lidar_grid: np.ndarray  # (cells, cells, 4) float32


# ---------------------------------------------------------------------------
# road geometry
# ---------------------------------------------------------------------------

def _straight(p0, p1, step=1.0):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    n = max(2, int(np.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
    return np.linspace(p0, p1, n)


def _arc(center, radius, a0, a1, step=0.08):
    n = max(2, int(np.ceil(abs(a1 - a0) / step)) + 1)
    ang = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=1)


def _dedup(points):
    out = [points[0]]
    for p in points[1:]:
        if np.linalg.norm(p - out[-1]) > 1e-9:
            out.append(p)
    return np.asarray(out)


def _corridor(centerline: np.ndarray, half_width: float) -> np.ndarray:
    """Polygon around a polyline: left boundary out, right boundary back."""
    c = np.asarray(centerline, float)
    dirs = np.diff(c, axis=0)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    vert_dirs = np.empty_like(c)
    vert_dirs[0] = dirs[0]
    vert_dirs[-1] = dirs[-1]
    if len(c) > 2:
        mids = dirs[:-1] + dirs[1:]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        vert_dirs[1:-1] = mids
    normals = np.stack([-vert_dirs[:, 1], vert_dirs[:, 0]], axis=1)
    left = c + half_width * normals
    right = c - half_width * normals
    return np.concatenate([left, right[::-1]])


@dataclass
class _Layout:
    command: str
    route: np.ndarray
    drivable: np.ndarray
    stop_line: Optional[np.ndarray] = None
    light_state: Optional[str] = None


def _layout(template: str, rng: np.random.Generator, cfg: GeneratorConfig) -> _Layout:
    w = cfg.lane_half_width
    if template == "straight_road":
        route = _straight([-10.0, 0.0], [55.0, 0.0])
        return _Layout("straight", route, _corridor(route, w))

    if template in ("left_turn", "right_turn"):
        sign = 1.0 if template == "left_turn" else -1.0
        radius = rng.uniform(11.0, 14.0)
        run_in = rng.uniform(10.0, 14.0)
        center = np.array([run_in, sign * radius])
        exit_start = np.array([run_in + radius, sign * radius])
        route = _dedup(np.concatenate([
            _straight([-10.0, 0.0], [run_in, 0.0]),
            _arc(center, radius, -sign * np.pi / 2, 0.0)[1:],
            _straight(exit_start, exit_start + [0.0, sign * 18.0])[1:],
        ]))
        return _Layout(template.split("_")[0], route, _corridor(route, w))

    if template == "t_junction":
        command = str(rng.choice(COMMANDS))
        xj = 20.0
        rj = 6.0
        if command == "straight":
            route = _straight([-10.0, 0.0], [42.0, 0.0])
        else:
            sign = 1.0 if command == "left" else -1.0
            center = np.array([xj - rj, sign * rj])
            route = _dedup(np.concatenate([
                _straight([-10.0, 0.0], [xj - rj, 0.0]),
                _arc(center, rj, -sign * np.pi / 2, 0.0)[1:],
                _straight([xj, sign * rj], [xj, sign * 26.0])[1:],
            ]))
        stem_sign = {"left": 1.0, "right": -1.0, "straight": 1.0}[command]
        drivable = np.array([
            [-10.0, -w], [42.0, -w], [42.0, w],
            [xj + w, w], [xj + w, 28.0], [xj - w, 28.0], [xj - w, w],
            [-10.0, w],
        ]) if stem_sign > 0 else np.array([
            [-10.0, -w], [xj - w, -w], [xj - w, -28.0], [xj + w, -28.0],
            [xj + w, -w], [42.0, -w], [42.0, w], [-10.0, w],
        ])
        return _Layout(command, route, drivable)

    if template == "crosswalk":
        route = _straight([-10.0, 0.0], [55.0, 0.0])
        stop_x = rng.uniform(14.0, 20.0)
        light = "red" if rng.random() < cfg.p_red_light else "green"
        stop = np.array([[stop_x, -w], [stop_x, w]])
        return _Layout("straight", route, _corridor(route, w), stop, light)

    raise GenerationError(f"unknown template {template!r} (expected one of {TEMPLATES})")

# ---------------------------------------------------------------------------
# expert driving
# ---------------------------------------------------------------------------

def _point_at_arclength(route: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    s = float(np.clip(s, 0.0, cum[-1]))
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = min(i, len(route) - 2)
    seg = cum[i + 1] - cum[i]
    t = 0.0 if seg <= 1e-12 else (s - cum[i]) / seg
    return route[i] + t * (route[i + 1] - route[i])


_CONFLICT_TAUS = np.arange(0.0, 8.01, 0.25)


def _agent_tracks(agents: Sequence, route: np.ndarray) -> list:
    """Precompute each agent's route-frame position over the sim horizon:
    (static?, lateral clearance, taus, arclengths, offsets)."""
    tracks = []
    for agent in agents:
        static = bool(np.hypot(*agent.velocity) < 0.3)
        taus = np.zeros(1) if static else _CONFLICT_TAUS
        centers = agent.center[None, :] + taus[:, None] * agent.velocity[None, :]
        s_a, d_a = project_onto_polyline(centers, route)
        clear = EGO_WIDTH / 2 + max(agent.extent) / 2 + 0.4
        tracks.append((static, clear, taus, s_a, d_a))
    return tracks


def _conflict_speed_limit(s_now: float, v: float, t_now: float, tracks: Sequence,
                          cfg: GeneratorConfig) -> float:
    """Speed cap from predicted crossing/lead agents on the route ahead.

    An agent whose predicted position sits within the route corridor at a
    time compatible with the ego's arrival there forces a braking distance
    that stops short of the conflict point.
    """
    limit = np.inf
    for static, clear, taus, s_a, d_a in tracks:
        dist = s_a - s_now
        ok = (d_a <= clear) & (dist >= 0.5) & (dist <= 30.0)
        if not static:
            eta = dist / max(v, 0.8)
            ok &= np.abs((taus - t_now) - eta) <= 2.0
        if not ok.any():
            continue
        gap = EGO_LENGTH + 2.0 + 0.5 * v
        braking = np.maximum(0.0, dist[ok] - gap)
        limit = min(limit, float(np.sqrt(2.0 * cfg.a_max * braking.min())))
    return limit


def drive_expert(layout: _Layout, v0: float, agents: Sequence,
                 cfg: GeneratorConfig) -> Trajectory:
    """Pure pursuit along the route with a trapezoidal speed profile that
    brakes for red stop lines and yields to conflicting agents."""
    route = layout.route
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(route, axis=0), axis=1))])
    stop_s = None
    if layout.stop_line is not None and layout.light_state == "red":
        mid = layout.stop_line.mean(axis=0)
        s_stop, _ = project_onto_polyline(mid, route)
        # stop with the front bumper short of the line
        stop_s = float(s_stop) - (EGO_CENTER_OFFSET + EGO_LENGTH / 2) - 0.6

    pos = np.zeros(2)
    heading = 0.0
    v = v0
    accel = 0.0
    jerk_max = 4.0  # keeps resampled jerk well inside the comfort bound
    tracks = _agent_tracks(agents, route)
    poses = [(0.0, 0.0, 0.0)]
    speeds = [v0]
    for step in range(SIM_STEPS):
        t_now = step * SIM_DT
        s_now = float(project_onto_polyline(pos, route)[0])
        target = _point_at_arclength(route, cum, s_now + cfg.lookahead)
        alpha = wrap_angle(math.atan2(target[1] - pos[1], target[0] - pos[0]) - heading)
        curvature = 2.0 * math.sin(alpha) / cfg.lookahead

        v_target = cfg.v_cruise
        if stop_s is not None:
            dist = stop_s - s_now
            # brake gently (below a_max) so the jerk-limited response still stops short
            v_target = 0.0 if dist <= 0.0 else min(
                v_target, math.sqrt(2.0 * 1.4 * dist))
        v_target = min(v_target, _conflict_speed_limit(s_now, v, t_now, tracks, cfg))

        a_des = float(np.clip((v_target - v) / 0.4, -cfg.a_max, cfg.a_max))
        accel += float(np.clip(a_des - accel, -jerk_max * SIM_DT, jerk_max * SIM_DT))
        v = max(0.0, v + accel * SIM_DT)
        if v == 0.0 and accel < 0.0:
            accel = 0.0
        heading += v * curvature * SIM_DT
        pos = pos + v * SIM_DT * np.array([math.cos(heading), math.sin(heading)])
        poses.append((pos[0], pos[1], heading))
        speeds.append(v)

    idx = [5, 10, 15, 20, 25, 30, 35, 40]
    pts = np.array([[poses[i][0], poses[i][1], wrap_angle(poses[i][2])] for i in idx])
    return Trajectory(pts)


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------

def _ego_start_box():
    center = np.array([EGO_CENTER_OFFSET, 0.0])
    return center, np.array([EGO_LENGTH, EGO_WIDTH]), 0.0


def _agent_clear(agent: AgentState, others: Sequence[AgentState]) -> bool:
    ec, ee, eh = _ego_start_box()
    if boxes_overlap(agent.center, agent.extent, agent.heading, ec, ee, eh):
        return False
    for other in others:
        if boxes_overlap(agent.center, agent.extent, agent.heading,
                         other.center, other.extent, other.heading):
            return False
    return True


def _sample_agents(template: str, layout: _Layout, rng: np.random.Generator,
                   cfg: GeneratorConfig) -> list:
    """Template-specific traffic, rejection-sampled to be mutually disjoint."""
    agents: list[AgentState] = []
    n_target = int(rng.integers(0, cfg.max_agents + 1))

    def try_add(maker) -> None:
        for _ in range(cfg.placement_attempts):
            cand = maker()
            if cand is not None and _agent_clear(cand, agents):
                agents.append(cand)
                return

    for _ in range(n_target):
        kind = rng.random()
        if template == "crosswalk" and kind < 0.6:
            def maker():
                x = rng.uniform(12.0, 30.0)
                side = 1.0 if rng.random() < 0.5 else -1.0
                speed = rng.uniform(0.6, 1.4)
                start_y = side * rng.uniform(5.0, 12.0)
                return AgentState(center=[x, start_y], extent=[0.6, 0.6],
                                  heading=-side * np.pi / 2,
                                  velocity=[0.0, -side * speed])
        elif kind < 0.45:
            def maker():
                # lead vehicle in the ego lane, driving away
                x = rng.uniform(18.0, 40.0)
                speed = rng.uniform(3.0, 8.0)
                return AgentState(center=[x, 0.0], extent=[4.5, 1.9],
                                  heading=0.0, velocity=[speed, 0.0])
        elif kind < 0.75:
            def maker():
                # oncoming vehicle in the opposite lane
                x = rng.uniform(25.0, 50.0)
                speed = rng.uniform(3.0, 8.0)
                return AgentState(center=[x, 2.3], extent=[4.5, 1.6],
                                  heading=np.pi, velocity=[-speed, 0.0])
        else:
            def maker():
                # parked vehicle at the road edge
                x = rng.uniform(6.0, 45.0)
                side = 1.0 if rng.random() < 0.5 else -1.0
                return AgentState(center=[x, side * 2.75], extent=[4.2, 1.4],
                                  heading=0.0, velocity=[0.0, 0.0])
        try_add(maker)
    return agents


# ---------------------------------------------------------------------------
# sensor grids
# ---------------------------------------------------------------------------

def _raster_lidar(scenario_agents: Sequence, drivable: np.ndarray,
                  cfg: GeneratorConfig) -> np.ndarray:
    n = cfg.lidar_cells
    xs = cfg.bev_x_min + (np.arange(n) + 0.5) * cfg.lidar_cell
    ys = cfg.bev_y_min + (np.arange(n) + 0.5) * cfg.lidar_cell
    cx, cy = np.meshgrid(xs, ys, indexing="ij")
    cells = np.stack([cx, cy], axis=-1)  # (n, n, 2)
    grid = np.zeros((n, n, 4))
    grid[:, :, 3] = point_in_polygon(cells, drivable).astype(float)
    for a in scenario_agents:
        rel = cells - a.center
        c, s = math.cos(a.heading), math.sin(a.heading)
        local_x = rel[..., 0] * c + rel[..., 1] * s
        local_y = -rel[..., 0] * s + rel[..., 1] * c
        inside = (np.abs(local_x) <= a.extent[0] / 2) & (np.abs(local_y) <= a.extent[1] / 2)
        # guarantee at least the cell containing the center is marked
        ci = int((a.center[0] - cfg.bev_x_min) / cfg.lidar_cell)
        cj = int((a.center[1] - cfg.bev_y_min) / cfg.lidar_cell)
        if 0 <= ci < n and 0 <= cj < n:
            inside[ci, cj] = True
        grid[inside, 0] = 1.0
        grid[inside, 1] = a.velocity[0]
        grid[inside, 2] = a.velocity[1]
    return grid.astype(np.float32)


def _raster_image(scenario_agents: Sequence, drivable: np.ndarray,
                  rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    """Forward-biased strip: columns by bearing, rows by distance (near at
    the bottom row), plus seeded noise."""
    rows, cols = cfg.image_rows, cfg.image_cols
    bearings = np.linspace(-np.pi / 3, np.pi / 3, cols)
    dists = np.linspace(50.0, 2.0, rows)  # far at row 0
    d, b = np.meshgrid(dists, bearings, indexing="ij")
    pts = np.stack([d * np.cos(b), d * np.sin(b)], axis=-1)
    grid = np.zeros((rows, cols, 4))
    grid[:, :, 3] = point_in_polygon(pts, drivable).astype(float)
    for a in scenario_agents:
        rel = pts - a.center
        c, s = math.cos(a.heading), math.sin(a.heading)
        local_x = rel[..., 0] * c + rel[..., 1] * s
        local_y = -rel[..., 0] * s + rel[..., 1] * c
        pad = 0.6  # agents appear slightly larger than life in the cheap view
        inside = (np.abs(local_x) <= a.extent[0] / 2 + pad) \
            & (np.abs(local_y) <= a.extent[1] / 2 + pad)
        grid[inside, 0] = 1.0
        grid[inside, 1] = a.velocity[0]
        grid[inside, 2] = a.velocity[1]
    grid += cfg.image_noise * rng.standard_normal(grid.shape)
    return grid.astype(np.float32)


# ---------------------------------------------------------------------------
# generation and validation
# ---------------------------------------------------------------------------

def _expert_valid(scenario: Scenario) -> bool:
    s = subscores(rollout(scenario.expert, scenario.ego), scenario)
    return s.nc == 1.0 and s.dac == 1.0 and s.ep == 1.0


def generate(seed: int, template: str, config: Optional[GeneratorConfig] = None) -> Scenario:
    """Deterministic scenario for (seed, template); regenerates with
    incremented sub-seeds until the expert validates, bounded."""
    cfg = config or GeneratorConfig()
    if template not in TEMPLATES:
        raise GenerationError(f"unknown template {template!r} (expected one of {TEMPLATES})")
    t_idx = TEMPLATES.index(template)
    for subseed in range(cfg.max_subseeds):
        rng = np.random.default_rng([seed, t_idx, subseed])
        layout = _layout(template, rng, cfg)
        command = layout.command
        if cfg.p_unknown_command > 0 and rng.random() < cfg.p_unknown_command:
            command = UNKNOWN_COMMAND
        v0 = rng.uniform(2.0, 8.0)
        agents = _sample_agents(template, layout, rng, cfg)
        expert = drive_expert(layout, v0, agents, cfg)
        history = np.array([[-v0 * 0.5 * k, 0.0, 0.0] for k in (4, 3, 2, 1)])
        scenario = Scenario(
            id=f"{template}-{seed:08d}",
            command=command,
            ego=EgoState(pose=[0.0, 0.0, 0.0], speed=v0, accel=0.0),
            agents=agents,
            drivable=layout.drivable,
            route=layout.route,
            stop_line=layout.stop_line,
            light_state=layout.light_state,
            history=history,
            expert=expert,
            image_grid=_raster_image(agents, layout.drivable, rng, cfg),
            lidar_grid=_raster_lidar(agents, layout.drivable, cfg),
        )
        if _expert_valid(scenario):
            return scenario
    raise GenerationError(
        f"no valid scenario for seed={seed} template={template} "
        f"after {cfg.max_subseeds} sub-seeds")


# ---------------------------------------------------------------------------
# persistence (line-delimited records, bit-exact round-trip)
# ---------------------------------------------------------------------------

def _b64_grid(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unb64_grid(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f4").reshape(obj["shape"]).copy()


def scenario_to_record(s: Scenario) -> dict:
    return {
        "version": DATASET_FORMAT_VERSION,
        "id": s.id,
        "command": s.command,
        "ego": {"pose": s.ego.pose.tolist(), "speed": s.ego.speed, "accel": s.ego.accel},
        "agents": [{"center": a.center.tolist(), "extent": a.extent.tolist(),
                    "heading": a.heading, "velocity": a.velocity.tolist()}
                   for a in s.agents],
        "drivable": np.asarray(s.drivable).tolist(),
        "route": np.asarray(s.route).tolist(),
        "stop_line": None if s.stop_line is None else np.asarray(s.stop_line).tolist(),
        "light_state": s.light_state,
        "history": np.asarray(s.history).tolist(),
        "expert": s.expert.points.tolist(),
        "image_grid": _b64_grid(s.image_grid),
        "lidar_grid": _b64_grid(s.lidar_grid),
    }


def scenario_from_record(doc: dict, line: int = 0) -> Scenario:
    def need(path: str, obj, key):
        try:
            return obj[key]
        except (KeyError, TypeError, IndexError):
            raise DatasetError(f"line {line}: missing field {path}") from None

    version = need("version", doc, "version")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetError(
            f"line {line}: dataset format version {version}, "
            f"expected {DATASET_FORMAT_VERSION}")
    ego_doc = need("ego", doc, "ego")
    agents = []
    for i, a in enumerate(need("agents", doc, "agents")):
        agents.append(AgentState(
            center=need(f"agents[{i}].center", a, "center"),
            extent=need(f"agents[{i}].extent", a, "extent"),
            heading=need(f"agents[{i}].heading", a, "heading"),
            velocity=need(f"agents[{i}].velocity", a, "velocity")))
    stop_line = need("stop_line", doc, "stop_line")
    return Scenario(
        id=need("id", doc, "id"),
        command=need("command", doc, "command"),
        ego=EgoState(pose=need("ego.pose", ego_doc, "pose"),
                     speed=need("ego.speed", ego_doc, "speed"),
                     accel=need("ego.accel", ego_doc, "accel")),
        agents=agents,
        drivable=np.asarray(need("drivable", doc, "drivable"), dtype=np.float64),
        route=np.asarray(need("route", doc, "route"), dtype=np.float64),
        stop_line=None if stop_line is None else np.asarray(stop_line, dtype=np.float64),
        light_state=need("light_state", doc, "light_state"),
        history=np.asarray(need("history", doc, "history"), dtype=np.float64),
        expert=Trajectory(np.asarray(need("expert", doc, "expert"), dtype=np.float64)),
        image_grid=_unb64_grid(need("image_grid", doc, "image_grid")),
        lidar_grid=_unb64_grid(need("lidar_grid", doc, "lidar_grid")),
    )


def save_dataset(scenarios: Sequence[Scenario], path) -> None:
    with open(path, "w") as fh:
        for s in scenarios:
            fh.write(json.dumps(scenario_to_record(s)) + "\n")


def load_dataset(path) -> list:
    out = []
    with open(path) as fh:
        for i, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                doc = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {i}: not valid JSON ({exc})") from None
            out.append(scenario_from_record(doc, line=i))
    return out
