"""Deterministic kinematic scenario generator and oracle world.

Scenarios hold analytically-moving agents (constant speed + yaw rate
unicycles) on axis-aligned drivable rectangles. Rasterizing a scenario at
a frame yields exact semantic / flow / instance ground truth in any ego
frame, which makes this module double as the dataset generator and as a
perfect world model for planner tests.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

from .actions import TRAJECTORY_STEP, VELOCITY, ActionCondition
from .grid import (
    DRIVABLE,
    GMO_CATEGORIES,
    PEDESTRIAN,
    STATIC,
    VEHICLE,
    EgoPose,
    FlowGrid,
    GridConfig,
    InstanceGrid,
    SemanticGrid,
    compose,
    inverse,
)

SCENARIO_SCHEMA_VERSION = 1

# statics occupy z in [0, 2) above the ground slab
_STATIC_Z = (0.0, 2.0)


@dataclass(frozen=True)
class AgentSpec:
    id: int
    category: int
    footprint: tuple[float, float]  # length x width, meters
    pose0: EgoPose  # world frame
    speed: float  # m/s
    yaw_rate: float  # rad/s
    z_extent: tuple[float, float]

    def __post_init__(self):
        if self.id <= 0:
            raise ValueError("agent id must be positive")
        if self.category not in GMO_CATEGORIES:
            raise ValueError(f"agent category {self.category} is not a movable category")
        if self.footprint[0] <= 0 or self.footprint[1] <= 0:
            raise ValueError("footprint must be positive")


@dataclass(frozen=True)
class Scenario:
    seed: int
    horizon: int
    dt: float
    agents: tuple[AgentSpec, ...]
    drivable: tuple[tuple[float, float, float, float], ...]
    static_obstacles: tuple[tuple[float, float, float, float], ...]
    ego0: EgoPose
    ego_footprint: tuple[float, float]

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not any(_point_in_rect((self.ego0.x, self.ego0.y), r) for r in self.drivable):
            raise ValueError("ego start pose is not inside any drivable rectangle")


@dataclass(frozen=True)
class GridFrame:
    t: int
    semantic: SemanticGrid
    flow: FlowGrid
    instances: InstanceGrid
    ego_pose_world: EgoPose

    def __post_init__(self):
        if not (self.semantic.config == self.flow.config == self.instances.config):
            raise ValueError("semantic/flow/instance grids must share one GridConfig")


def _point_in_rect(p, rect) -> bool:
    xmin, ymin, xmax, ymax = rect
    return xmin <= p[0] <= xmax and ymin <= p[1] <= ymax


def agent_pose(agent: AgentSpec, t: int, dt: float) -> EgoPose:
    """Closed-form unicycle pose after t frames of constant speed and
    yaw rate, starting from pose0."""
    T = t * dt
    yaw0 = agent.pose0.yaw
    if abs(agent.yaw_rate) < 1e-12:
        x = agent.pose0.x + agent.speed * T * math.cos(yaw0)
        y = agent.pose0.y + agent.speed * T * math.sin(yaw0)
        return EgoPose(yaw0, x, y)
    yaw = yaw0 + agent.yaw_rate * T
    r = agent.speed / agent.yaw_rate
    x = agent.pose0.x + r * (math.sin(yaw) - math.sin(yaw0))
    y = agent.pose0.y - r * (math.cos(yaw) - math.cos(yaw0))
    return EgoPose(yaw, x, y)


def step_agents(scn: Scenario, t: int) -> list[EgoPose]:
    """World-frame poses of every agent at frame t."""
    if t < 0:
        raise ValueError("frame index must be non-negative")
    return [agent_pose(a, t, scn.dt) for a in scn.agents]


def agent_center_world(agent: AgentSpec, t: int, dt: float) -> np.ndarray:
    """3D instance center at frame t: planar pose plus mid z extent."""
    p = agent_pose(agent, t, dt)
    return np.array([p.x, p.y, 0.5 * (agent.z_extent[0] + agent.z_extent[1])])


def _z_slab(cfg: GridConfig, z_extent, dilation=0.0) -> np.ndarray:
    zc = cfg.z_centers()
    return (zc >= z_extent[0] - dilation) & (zc < z_extent[1] + dilation)


def rasterize_frame(scn: Scenario, t: int, ego_pose: EgoPose, cfg: GridConfig,
                    dilation: float = 0.0) -> GridFrame:
    """Exact ground truth at frame t expressed in the given ego frame.

    Voxels whose center falls inside an agent's oriented box get the
    agent's category and instance id; drivable rectangles mark the ground
    slab; static obstacles fill a fixed z band. Flow vectors on movable
    voxels point to the instance's center at t-1 (t=0 points to the
    center at t=0), re-expressed in the ego frame at t.

    `dilation` inflates agent boxes on every axis (0 = fine-grained mode).
    """
    half_l, half_w = scn.ego_footprint[0] / 2, scn.ego_footprint[1] / 2
    if (cfg.x_range[0] > -half_l or cfg.x_range[1] < half_l
            or cfg.y_range[0] > -half_w or cfg.y_range[1] < half_w):
        raise ValueError("grid is too small to contain the ego footprint")

    h, w, d = cfg.dims
    labels = np.zeros((h, w, d), np.uint8)
    ids = np.zeros((h, w, d), np.int32)
    flow = np.zeros((h, w, d, 3), np.float32)

    centers_ego = cfg.bev_cell_centers()  # (h, w, 2)
    centers_world = ego_pose.apply(centers_ego.reshape(-1, 2)).reshape(h, w, 2)

    for rect in scn.drivable:
        xmin, ymin, xmax, ymax = rect
        inside = (
            (centers_world[..., 0] >= xmin) & (centers_world[..., 0] <= xmax)
            & (centers_world[..., 1] >= ymin) & (centers_world[..., 1] <= ymax)
        )
        labels[inside, 0] = DRIVABLE

    static_slab = _z_slab(cfg, _STATIC_Z)
    for rect in scn.static_obstacles:
        xmin, ymin, xmax, ymax = rect
        inside = (
            (centers_world[..., 0] >= xmin) & (centers_world[..., 0] <= xmax)
            & (centers_world[..., 1] >= ymin) & (centers_world[..., 1] <= ymax)
        )
        cells = np.nonzero(inside)
        for zi in np.nonzero(static_slab)[0]:
            labels[cells[0], cells[1], zi] = STATIC

    zc = cfg.z_centers()
    for agent in scn.agents:
        pose_w = agent_pose(agent, t, scn.dt)
        local = inverse(pose_w).apply(centers_world.reshape(-1, 2)).reshape(h, w, 2)
        hl = agent.footprint[0] / 2 + dilation
        hw = agent.footprint[1] / 2 + dilation
        inside = (np.abs(local[..., 0]) <= hl) & (np.abs(local[..., 1]) <= hw)
        slab = _z_slab(cfg, agent.z_extent, dilation)
        if not inside.any() or not slab.any():
            continue
        cells = np.nonzero(inside)
        prev_center = agent_center_world(agent, max(t - 1, 0), scn.dt)
        # backward flow, expressed in the ego frame at t
        dxy_world = prev_center[:2][None, :] - centers_world[cells]
        dxy_ego = inverse(ego_pose).rotate(dxy_world)
        for zi in np.nonzero(slab)[0]:
            labels[cells[0], cells[1], zi] = agent.category
            ids[cells[0], cells[1], zi] = agent.id
            flow[cells[0], cells[1], zi, 0] = dxy_ego[:, 0]
            flow[cells[0], cells[1], zi, 1] = dxy_ego[:, 1]
            flow[cells[0], cells[1], zi, 2] = prev_center[2] - zc[zi]

    # flow is defined only on movable voxels; an overwritten agent voxel
    # keeps the flow of the agent that owns it last
    gmo = np.isin(labels, sorted(GMO_CATEGORIES))
    flow[~gmo] = 0.0
    ids[~gmo] = 0

    return GridFrame(
        t=t,
        semantic=SemanticGrid(cfg, labels),
        flow=FlowGrid(cfg, flow),
        instances=InstanceGrid(cfg, ids),
        ego_pose_world=ego_pose,
    )


def ego_motion_from_action(action: ActionCondition, dt: float) -> EgoPose:
    """Planar ego displacement implied by one action over one frame.

    Only trajectory steps and velocities define a displacement; heading is
    held constant (trajectories are pure (dx, dy) sequences). Curvature
    and command conditions cannot be converted and raise.
    """
    if action.kind == TRAJECTORY_STEP:
        return EgoPose(0.0, action.values[0], action.values[1])
    if action.kind == VELOCITY:
        return EgoPose(0.0, action.values[0] * dt, action.values[1] * dt)
    raise ValueError(
        f"{action.kind} conditions do not define ego motion; use the trajectory "
        "sampler / planner to turn them into trajectory steps"
    )


def oracle_forecast(scn: Scenario, t0: int, actions, cfg: GridConfig,
                    ego_pose: EgoPose | None = None) -> list[GridFrame]:
    """Ground-truth future frames under the given ego actions.

    Returns len(actions) frames at t0+1 .. t0+len(actions), each rasterized
    in the ego frame reached by accumulating the action displacements from
    `ego_pose` (default: the scenario's start pose). Agents move on their
    own kinematics regardless of ego.
    """
    pose = scn.ego0 if ego_pose is None else ego_pose
    frames = []
    for i, action in enumerate(actions):
        pose = compose(pose, ego_motion_from_action(action, scn.dt))
        frames.append(rasterize_frame(scn, t0 + i + 1, pose, cfg))
    return frames


# --- random scenario generation -------------------------------------------

_VEHICLE_FOOTPRINT = (4.0, 2.0)
_VEHICLE_Z = (0.0, 1.5)
_PED_FOOTPRINT = (0.8, 0.8)
_PED_Z = (0.0, 1.8)
_EGO_FOOTPRINT = (4.0, 1.8)

DIFFICULTIES = ("sparse", "dense", "corridor")


def _rng_for(seed: int, difficulty: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(difficulty.encode())])


def _make_agent(rng, agent_id, x, y, yaw, speed, yaw_rate) -> AgentSpec:
    if rng.random() < 0.3:
        cat, fp, zext = PEDESTRIAN, _PED_FOOTPRINT, _PED_Z
        speed *= 0.5
    else:
        cat, fp, zext = VEHICLE, _VEHICLE_FOOTPRINT, _VEHICLE_Z
    return AgentSpec(agent_id, cat, fp, EgoPose(yaw, x, y), float(speed), float(yaw_rate), zext)


def generate_random_scenario(seed: int, difficulty: str = "sparse") -> Scenario:
    """Deterministic scenario from (seed, difficulty).

    sparse: 1-3 well-separated slow agents (separation is preserved over
    the whole horizon, which keeps instance association unambiguous).
    dense: 8-15 agents scattered around the ego.
    corridor: guarantees a collision-free straight ego corridor of at
    least ego length x horizon meters, verified by construction.
    """
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    rng = _rng_for(seed, difficulty)
    ego0 = EgoPose.identity()

    if difficulty == "sparse":
        corners = [(-6.0, -6.0), (6.0, -6.0), (-6.0, 6.0), (6.0, 6.0)]
        rng.shuffle(corners)
        n = int(rng.integers(1, 4))
        agents = []
        for i in range(n):
            cx, cy = corners[i]
            x = cx + rng.uniform(-0.5, 0.5)
            y = cy + rng.uniform(-0.5, 0.5)
            agents.append(_make_agent(rng, i + 1, x, y, rng.uniform(-math.pi, math.pi),
                                      rng.uniform(0.0, 0.5), rng.uniform(-0.3, 0.3)))
        return Scenario(
            seed=seed, horizon=6, dt=0.5, agents=tuple(agents),
            drivable=((-10.0, -10.0, 10.0, 10.0),), static_obstacles=(),
            ego0=ego0, ego_footprint=_EGO_FOOTPRINT,
        )

    if difficulty == "dense":
        n = int(rng.integers(8, 16))
        agents = []
        for i in range(n):
            while True:
                x, y = rng.uniform(-7, 7, 2)
                if math.hypot(x, y) > 3.0:
                    break
            agents.append(_make_agent(rng, i + 1, x, y, rng.uniform(-math.pi, math.pi),
                                      rng.uniform(0.0, 2.0), rng.uniform(-0.5, 0.5)))
        statics = []
        for _ in range(int(rng.integers(0, 4))):
            sx, sy = rng.uniform(-7, 7, 2)
            if math.hypot(sx, sy) < 4.0:
                continue
            statics.append((sx - 0.5, sy - 0.5, sx + 0.5, sy + 0.5))
        return Scenario(
            seed=seed, horizon=6, dt=0.5, agents=tuple(agents),
            drivable=((-10.0, -10.0, 10.0, 10.0),), static_obstacles=tuple(statics),
            ego0=ego0, ego_footprint=_EGO_FOOTPRINT,
        )

    # corridor: drivable band along +x, traffic strictly outside it
    horizon = 8
    band = (-6.0, -3.5, 34.0, 3.5)
    n = int(rng.integers(2, 6))
    agents = []
    for i in range(n):
        side = 1.0 if rng.random() < 0.5 else -1.0
        y = side * rng.uniform(5.5, 7.0)
        x = rng.uniform(-4.0, 24.0)
        yaw = 0.0 if rng.random() < 0.5 else math.pi
        agents.append(_make_agent(rng, i + 1, x, y, yaw, rng.uniform(0.0, 2.0), 0.0))
    statics = []
    for _ in range(int(rng.integers(0, 3))):
        sx = rng.uniform(0.0, 20.0)
        sy = (1.0 if rng.random() < 0.5 else -1.0) * rng.uniform(5.0, 7.0)
        statics.append((sx - 0.6, sy - 0.6, sx + 0.6, sy + 0.6))
    scn = Scenario(
        seed=seed, horizon=horizon, dt=0.5, agents=tuple(agents),
        drivable=(band,), static_obstacles=tuple(statics),
        ego0=ego0, ego_footprint=_EGO_FOOTPRINT,
    )
    assert corridor_clear(scn), "corridor construction must yield a clear corridor"
    return scn


def _obb_corners(pose: EgoPose, footprint) -> np.ndarray:
    hl, hw = footprint[0] / 2, footprint[1] / 2
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    return pose.apply(local)


def _rect_overlaps_obb(rect, pose: EgoPose, footprint) -> bool:
    """Separating-axis test for an axis-aligned rect vs an oriented box."""
    xmin, ymin, xmax, ymax = rect
    rect_pts = np.array([[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])
    box_pts = _obb_corners(pose, footprint)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    axes = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([c, s]), np.array([-s, c])]
    for ax in axes:
        r = rect_pts @ ax
        b = box_pts @ ax
        if r.max() < b.min() - 1e-12 or b.max() < r.min() - 1e-12:
            return False
    return True


def corridor_clear(scn: Scenario, width: float | None = None,
                   length: float | None = None, horizon: int | None = None) -> bool:
    """Planner feasibility oracle: is a straight-ahead ego corridor free?

    The corridor is the axis-aligned rectangle from the ego tail to
    `length` meters ahead (default ego length x horizon), `width` wide
    (default ego width + 1 m clearance). It must lie on drivable area and
    stay clear of every agent box and static obstacle for all frames.
    """
    horizon = scn.horizon if horizon is None else horizon
    length = scn.ego_footprint[0] * horizon if length is None else length
    width = scn.ego_footprint[1] + 1.0 if width is None else width
    ego = scn.ego0
    tail = -scn.ego_footprint[0] / 2
    corners_local = np.array([[tail, -width / 2], [length, -width / 2],
                              [length, width / 2], [tail, width / 2]])
    corners = ego.apply(corners_local)
    xmin, ymin = corners.min(axis=0)
    xmax, ymax = corners.max(axis=0)
    corridor = (xmin, ymin, xmax, ymax)

    if not any(r[0] <= xmin and r[1] <= ymin and r[2] >= xmax and r[3] >= ymax
               for r in scn.drivable):
        return False
    for rect in scn.static_obstacles:
        if not (rect[2] < xmin or rect[0] > xmax or rect[3] < ymin or rect[1] > ymax):
            return False
    for t in range(horizon + 1):
        for agent in scn.agents:
            if _rect_overlaps_obb(corridor, agent_pose(agent, t, scn.dt), agent.footprint):
                return False
    return True


# --- scenario JSON ----------------------------------------------------------

def scenario_to_json(scn: Scenario) -> dict:
    return {
        "v": SCENARIO_SCHEMA_VERSION,
        "seed": scn.seed,
        "horizon": scn.horizon,
        "dt": scn.dt,
        "ego0": {"yaw": scn.ego0.yaw, "x": scn.ego0.x, "y": scn.ego0.y},
        "ego_footprint": list(scn.ego_footprint),
        "agents": [
            {
                "id": a.id,
                "category": a.category,
                "footprint": list(a.footprint),
                "pose0": {"yaw": a.pose0.yaw, "x": a.pose0.x, "y": a.pose0.y},
                "speed": a.speed,
                "yaw_rate": a.yaw_rate,
                "z_extent": list(a.z_extent),
            }
            for a in scn.agents
        ],
        "drivable": [list(r) for r in scn.drivable],
        "static_obstacles": [list(r) for r in scn.static_obstacles],
    }


def scenario_from_json(data: dict) -> Scenario:
    if data.get("v") != SCENARIO_SCHEMA_VERSION:
        raise ValueError(f"unsupported scenario schema version {data.get('v')!r}")
    return Scenario(
        seed=int(data["seed"]),
        horizon=int(data["horizon"]),
        dt=float(data["dt"]),
        agents=tuple(
            AgentSpec(
                id=int(a["id"]),
                category=int(a["category"]),
                footprint=tuple(a["footprint"]),
                pose0=EgoPose(a["pose0"]["yaw"], a["pose0"]["x"], a["pose0"]["y"]),
                speed=float(a["speed"]),
                yaw_rate=float(a["yaw_rate"]),
                z_extent=tuple(a["z_extent"]),
            )
            for a in data["agents"]
        ),
        drivable=tuple(tuple(r) for r in data["drivable"]),
        static_obstacles=tuple(tuple(r) for r in data["static_obstacles"]),
        ego0=EgoPose(data["ego0"]["yaw"], data["ego0"]["x"], data["ego0"]["y"]),
        ego_footprint=tuple(data["ego_footprint"]),
    )


def save_scenario(path, scn: Scenario) -> None:
    with open(path, "w") as f:
        json.dump(scenario_to_json(scn), f, sort_keys=True, indent=2)
        f.write("\n")


def load_scenario(path) -> Scenario:
    with open(path) as f:
        return scenario_from_json(json.load(f))
