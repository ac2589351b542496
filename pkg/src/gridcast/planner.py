"""Occupancy-based end-to-end planner.

Candidate trajectories are constant speed/curvature arcs filtered by a
high-level command. Each candidate is scored by three cost factors
against forecast occupancy: agent safety (hard footprint overlap with
movable voxels plus a soft proximity term), road safety (fraction of the
footprint off the drivable surface), and a learned volume cost sampled
from a BEV cost map. Selection excludes colliding candidates outright;
an optional BEV refinement adds residual waypoint offsets via
cross-attention. The closed loop alternates forecast -> sample -> cost ->
select -> refine, feeding the chosen step back as the next trajectory
action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .actions import ActionCondition
from .config import PlannerConfig
from .grid import GMO_CATEGORIES, DRIVABLE, GridConfig, SemanticGrid
from .kernels import F32, bilinear_sample_2d, derive_seed
from .neural import AttentionParams, FfnParams, LinearParams, attention, relu

COMMANDS = ("forward", "left", "right")


@dataclass(frozen=True)
class Trajectory:
    """Cumulative (dx, dy) waypoints in the current ego frame, one per
    future step of length dt."""

    waypoints: np.ndarray  # (n, 2) float64
    dt: float

    def __post_init__(self):
        wp = np.ascontiguousarray(self.waypoints, np.float64)
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 1:
            raise ValueError(f"waypoints must be (n, 2), got {wp.shape}")
        if not np.isfinite(wp).all():
            raise ValueError("waypoints must be finite")
        object.__setattr__(self, "waypoints", wp)

    def __len__(self) -> int:
        return len(self.waypoints)

    def steps(self) -> np.ndarray:
        """Per-step displacements (n, 2)."""
        return np.diff(self.waypoints, axis=0, prepend=np.zeros((1, 2)))

    def headings(self) -> np.ndarray:
        """Per-waypoint heading from the arriving segment; zero-length
        segments inherit the previous heading (0 at the start)."""
        steps = self.steps()
        out = np.zeros(len(steps))
        prev = 0.0
        for i, (dx, dy) in enumerate(steps):
            if math.hypot(dx, dy) > 1e-12:
                prev = math.atan2(dy, dx)
            out[i] = prev
        return out


@dataclass(frozen=True)
class TrajectoryCandidateSet:
    candidates: tuple[Trajectory, ...]
    speeds: tuple[float, ...]
    curvatures: tuple[float, ...]
    command: str

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class CostBreakdown:
    agent: float
    road: float
    volume: float
    total: float
    hard_collision: tuple[bool, ...]

    @property
    def hard_any(self) -> bool:
        return any(self.hard_collision)


def arc_waypoints(speed: float, curvature: float, horizon: int, dt: float) -> np.ndarray:
    """Closed-form constant speed/curvature arc sampled at k*dt."""
    ts = (np.arange(horizon) + 1) * dt
    if abs(curvature) < 1e-12:
        return np.stack([speed * ts, np.zeros_like(ts)], axis=-1)
    theta = speed * curvature * ts
    return np.stack([np.sin(theta) / curvature, (1.0 - np.cos(theta)) / curvature], axis=-1)


def sample_trajectories(command: str, speeds, curvatures, horizon: int, dt: float,
                        kappa_straight: float = 0.01) -> TrajectoryCandidateSet:
    """Command-guided candidate set of constant speed/curvature arcs.

    Ordering is deterministic: speeds descending (major), curvatures by
    (|k|, k) ascending (minor), so candidate 0 is the fastest straight
    arc. Commands filter curvature sign: forward keeps |k| <=
    kappa_straight, left keeps k > 0, right keeps k < 0.
    """
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    if not speeds or not curvatures:
        raise ValueError("speed and curvature grids must be nonempty")
    if command == "forward":
        kept = [k for k in curvatures if abs(k) <= kappa_straight]
    elif command == "left":
        kept = [k for k in curvatures if k > 0]
    else:
        kept = [k for k in curvatures if k < 0]
    if not kept:
        raise ValueError(f"no curvature candidates survive the {command!r} filter")
    ordered_speeds = sorted(set(float(s) for s in speeds), reverse=True)
    ordered_kappas = sorted(set(float(k) for k in kept), key=lambda k: (abs(k), k))
    cands = []
    for v in ordered_speeds:
        for k in ordered_kappas:
            cands.append(Trajectory(arc_waypoints(v, k, horizon, dt), dt))
    return TrajectoryCandidateSet(tuple(cands), tuple(ordered_speeds), tuple(ordered_kappas), command)


# --- footprint geometry --------------------------------------------------------

def _lattice_cells(cfg: GridConfig, center, heading: float, half_l: float, half_w: float):
    """BEV lattice cells whose center lies in a rotated rectangle.

    Cells are enumerated on the grid's (unbounded) lattice so off-grid
    footprint cells are still counted. Returns (cells (m, 2) int64,
    in_grid (m,) bool, local (m, 2) offsets in the rectangle frame).
    """
    res = cfg.resolution
    reach = math.hypot(half_l, half_w) + res
    cx, cy = center
    i0 = math.floor((cx - reach - cfg.x_range[0]) / res)
    i1 = math.floor((cx + reach - cfg.x_range[0]) / res)
    j0 = math.floor((cy - reach - cfg.y_range[0]) / res)
    j1 = math.floor((cy + reach - cfg.y_range[0]) / res)
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    ii = ii.reshape(-1)
    jj = jj.reshape(-1)
    x = cfg.x_range[0] + (ii + 0.5) * res - cx
    y = cfg.y_range[0] + (jj + 0.5) * res - cy
    c, s = math.cos(heading), math.sin(heading)
    lx = c * x + s * y
    ly = -s * x + c * y
    inside = (np.abs(lx) <= half_l) & (np.abs(ly) <= half_w)
    cells = np.stack([ii[inside], jj[inside]], axis=-1)
    in_grid = (
        (cells[:, 0] >= 0) & (cells[:, 0] < cfg.h) & (cells[:, 1] >= 0) & (cells[:, 1] < cfg.w)
    )
    local = np.stack([lx[inside], ly[inside]], axis=-1)
    return cells, in_grid, local


def bev_category_mask(grid: SemanticGrid, categories=GMO_CATEGORIES) -> np.ndarray:
    """(h, w) mask: any voxel in the column carries one of the categories."""
    return np.isin(grid.labels, sorted(categories)).any(axis=2)


def footprint_collides(grid: SemanticGrid, center, heading: float, footprint,
                       categories=GMO_CATEGORIES) -> bool:
    """Does the ego footprint rectangle overlap any masked column?"""
    mask = bev_category_mask(grid, categories)
    cells, in_grid, _ = _lattice_cells(grid.config, center, heading,
                                       footprint[0] / 2, footprint[1] / 2)
    hit = cells[in_grid]
    return bool(mask[hit[:, 0], hit[:, 1]].any())


def agent_safety_cost(traj: Trajectory, future: list[SemanticGrid], ego_footprint,
                      cfg: PlannerConfig):
    """Per-step hard overlap flags plus a soft proximity penalty.

    Hard: any movable column under the footprint rectangle. Soft: movable
    columns inside the margin box (footprint inflated by the longitudinal
    / lateral margins) contribute exp(-d / sigma), d being the distance
    from the cell center to the footprint rectangle.
    """
    if len(future) < len(traj):
        raise ValueError(f"{len(future)} future grids for {len(traj)} waypoints")
    half_l, half_w = ego_footprint[0] / 2, ego_footprint[1] / 2
    headings = traj.headings()
    cost = 0.0
    flags = []
    for k, (wp, grid) in enumerate(zip(traj.waypoints, future)):
        gmo = bev_category_mask(grid)
        cells, in_grid, local = _lattice_cells(
            grid.config, wp, headings[k],
            half_l + cfg.longitudinal_margin, half_w + cfg.lateral_margin,
        )
        cells, local = cells[in_grid], local[in_grid]
        if not len(cells):
            flags.append(False)
            continue
        occupied = gmo[cells[:, 0], cells[:, 1]]
        if not occupied.any():
            flags.append(False)
            continue
        lx = np.abs(local[occupied, 0])
        ly = np.abs(local[occupied, 1])
        hard = (lx <= half_l) & (ly <= half_w)
        flags.append(bool(hard.any()))
        d = np.hypot(np.maximum(lx - half_l, 0.0), np.maximum(ly - half_w, 0.0))
        cost += float(np.exp(-d / cfg.sigma).sum())
    return cost, flags


def road_safety_cost(traj: Trajectory, future: list[SemanticGrid], ego_footprint) -> float:
    """Sum over steps of the fraction of footprint cells whose column has
    no drivable voxel (off-grid cells count as off-road)."""
    if len(future) < len(traj):
        raise ValueError(f"{len(future)} future grids for {len(traj)} waypoints")
    half_l, half_w = ego_footprint[0] / 2, ego_footprint[1] / 2
    headings = traj.headings()
    cost = 0.0
    for k, (wp, grid) in enumerate(zip(traj.waypoints, future)):
        drivable = bev_category_mask(grid, {DRIVABLE})
        cells, in_grid, _ = _lattice_cells(grid.config, wp, headings[k], half_l, half_w)
        if not len(cells):
            continue
        ok = np.zeros(len(cells), bool)
        hit = cells[in_grid]
        ok[in_grid] = drivable[hit[:, 0], hit[:, 1]]
        cost += float(np.count_nonzero(~ok) / len(cells))
    return cost


def volume_cost_map(bev_features: np.ndarray, head: LinearParams) -> np.ndarray:
    """(h, w) cost map from a 1x1 head over BEV features."""
    return head.apply(bev_features)[..., 0]


def waypoint_grid_coords(waypoints: np.ndarray, cfg: GridConfig) -> np.ndarray:
    """Fractional (row, col) BEV coordinates of metric waypoints."""
    wp = np.asarray(waypoints, np.float64)
    out = np.empty_like(wp)
    out[:, 0] = (wp[:, 0] - cfg.x_range[0]) / cfg.resolution - 0.5
    out[:, 1] = (wp[:, 1] - cfg.y_range[0]) / cfg.resolution - 0.5
    return out


def learned_volume_cost(traj: Trajectory, bev_features: np.ndarray | None,
                        head: LinearParams | None, cfg: GridConfig) -> float:
    """Sum of bilinear cost-map samples at the waypoints (zero padded
    outside the map). No features or a zero head cost nothing."""
    if bev_features is None or head is None:
        return 0.0
    cmap = volume_cost_map(bev_features, head)
    coords = waypoint_grid_coords(traj.waypoints, cfg)
    return float(bilinear_sample_2d(cmap[..., None], coords).sum())


def evaluate_candidates(candidates: TrajectoryCandidateSet, future: list[SemanticGrid],
                        cfg: PlannerConfig, bev_features=None,
                        volume_head: LinearParams | None = None) -> list[CostBreakdown]:
    grid_cfg = future[0].config
    out = []
    for traj in candidates.candidates:
        agent, flags = agent_safety_cost(traj, future, cfg.ego_footprint, cfg)
        road = road_safety_cost(traj, future, cfg.ego_footprint)
        volume = learned_volume_cost(traj, bev_features, volume_head, grid_cfg)
        total = cfg.w_agent * agent + cfg.w_road * road + cfg.w_volume * volume
        out.append(CostBreakdown(agent, road, volume, total, tuple(flags)))
    return out


def select_trajectory(candidates: TrajectoryCandidateSet, future: list[SemanticGrid],
                      cfg: PlannerConfig, bev_features=None,
                      volume_head: LinearParams | None = None):
    """Minimum-total-cost candidate among the collision-free ones.

    Candidates with any hard collision are excluded; if every candidate
    collides, the least-penalized one (total + hard_penalty per colliding
    step) is returned so the planner always outputs something. Ties break
    to the lowest candidate index.
    """
    if not len(candidates):
        raise ValueError("candidate set is empty")
    breakdowns = evaluate_candidates(candidates, future, cfg, bev_features, volume_head)
    safe = [i for i, b in enumerate(breakdowns) if not b.hard_any]
    if safe:
        best = min(safe, key=lambda i: (breakdowns[i].total, i))
    else:
        best = min(range(len(breakdowns)),
                   key=lambda i: (breakdowns[i].total
                                  + cfg.hard_penalty * sum(breakdowns[i].hard_collision), i))
    return candidates.candidates[best], best, breakdowns


# --- BEV refinement -------------------------------------------------------------

@dataclass(frozen=True)
class RefineParams:
    """Trajectory + command -> ego query; cross-attention over BEV cells;
    an MLP emits residual waypoint offsets (zero-initialized output layer
    makes refinement the identity)."""

    traj_embed: LinearParams  # 2n -> c
    query_proj: LinearParams  # c + 3 -> c
    attn: AttentionParams
    fc1: LinearParams  # c -> hidden
    fc2: LinearParams  # hidden -> 2n

    @classmethod
    def seeded(cls, seed: int, c: int, horizon: int, num_heads: int = 2,
               hidden: int = 32, scale: float = 0.1, zero_output: bool = True):
        return cls(
            traj_embed=LinearParams.seeded(derive_seed(seed, "embed"), 2 * horizon, c, scale),
            query_proj=LinearParams.seeded(derive_seed(seed, "query"), c + 3, c, scale),
            attn=AttentionParams.seeded(derive_seed(seed, "attn"), c, num_heads, scale),
            fc1=LinearParams.seeded(derive_seed(seed, "fc1"), c, hidden, scale),
            fc2=LinearParams.zeros(hidden, 2 * horizon) if zero_output
            else LinearParams.seeded(derive_seed(seed, "fc2"), hidden, 2 * horizon, scale),
        )


def bev_refine(traj: Trajectory, command: str, bev_features: np.ndarray,
               params: RefineParams) -> Trajectory:
    """Residual waypoint refinement from BEV latents."""
    if command not in COMMANDS:
        raise ValueError(f"unknown command {command!r}")
    n = len(traj)
    if params.traj_embed.din != 2 * n:
        raise ValueError(f"refine params sized for {params.traj_embed.din // 2} steps, got {n}")
    flat = traj.waypoints.reshape(-1).astype(F32)
    emb = params.traj_embed.apply(flat[None, :])
    onehot = np.zeros((1, 3), F32)
    onehot[0, COMMANDS.index(command)] = 1.0
    query = params.query_proj.apply(np.concatenate([emb, onehot], axis=1))
    h, w, c = bev_features.shape
    ctx = attention(query, bev_features.reshape(h * w, c), params.attn)
    offsets = params.fc2.apply(relu(params.fc1.apply(ctx)))[0]
    return Trajectory(traj.waypoints + offsets.astype(np.float64).reshape(n, 2), traj.dt)


# --- planning loss ----------------------------------------------------------------

def collision_count(traj: Trajectory, obstacle_grids: list[SemanticGrid], ego_footprint,
                    categories=GMO_CATEGORIES) -> int:
    """Total obstacle columns under the footprint along a trajectory."""
    if len(obstacle_grids) < len(traj):
        raise ValueError("not enough obstacle grids for the trajectory")
    half_l, half_w = ego_footprint[0] / 2, ego_footprint[1] / 2
    headings = traj.headings()
    count = 0
    for k, (wp, grid) in enumerate(zip(traj.waypoints, obstacle_grids)):
        mask = bev_category_mask(grid, categories)
        cells, in_grid, _ = _lattice_cells(grid.config, wp, headings[k], half_l, half_w)
        hit = cells[in_grid]
        count += int(np.count_nonzero(mask[hit[:, 0], hit[:, 1]]))
    return count


def plan_loss(candidate_costs: np.ndarray, expert_cost: float, expert: Trajectory,
              final: Trajectory, obstacle_grids: list[SemanticGrid], ego_footprint):
    """Max-margin + imitation + collision loss.

    margin = relu(expert_cost - min candidate cost); l2 = mean squared
    waypoint error between the final and expert trajectories; collision =
    obstacle columns under the final trajectory's footprint. Returns
    (loss, grads) with grads = {dcandidate_costs, dexpert_cost, dfinal};
    the collision count is a discrete term and carries no gradient.
    """
    costs = np.asarray(candidate_costs, np.float64)
    if costs.ndim != 1 or not len(costs):
        raise ValueError("candidate costs must be a nonempty vector")
    if len(final) != len(expert):
        raise ValueError("final and expert trajectories must have equal length")
    best = int(np.argmin(costs))
    margin = float(expert_cost) - float(costs[best])
    dcosts = np.zeros_like(costs)
    dexpert = 0.0
    if margin > 0:
        dcosts[best] = -1.0
        dexpert = 1.0
    margin = max(margin, 0.0)

    diff = final.waypoints - expert.waypoints
    n = len(final)
    l2 = float((diff ** 2).sum() / n)
    dfinal = 2.0 * diff / n

    coll = float(collision_count(final, obstacle_grids, ego_footprint))
    loss = margin + l2 + coll
    return loss, {"dcandidate_costs": dcosts, "dexpert_cost": dexpert, "dfinal": dfinal}


# --- closed-loop rollout ------------------------------------------------------------

@dataclass(frozen=True)
class PlanStep:
    t: int
    selected_index: int
    action: ActionCondition
    waypoints: np.ndarray  # selected (refined) candidate, current ego frame
    breakdowns: tuple[CostBreakdown, ...]
    collided: bool
    frame: object  # realized GridFrame after applying the action


@dataclass(frozen=True)
class PlanRollout:
    steps: tuple[PlanStep, ...]
    executed: Trajectory  # cumulative executed waypoints in the initial ego frame


def closed_loop_rollout(world, commands, horizon: int, cfg: PlannerConfig,
                        volume_head: LinearParams | None = None,
                        refine: RefineParams | None = None) -> PlanRollout:
    """Alternate forecast -> sample -> cost -> select -> refine -> act.

    `world` provides plan_forecast(n) (future SemanticGrids in the current
    ego frame), bev_features() (latents or None), and advance(action)
    (apply one trajectory step, returning the realized frame). The
    selected candidate's first step feeds back as the next trajectory
    action. Per-step cost breakdowns are recorded for explainability.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    commands = list(commands)
    if len(commands) == 1:
        commands = commands * horizon
    if len(commands) != horizon:
        raise ValueError(f"{len(commands)} commands for horizon {horizon}")
    steps = []
    executed = []
    position = np.zeros(2)
    for i in range(horizon):
        future = world.plan_forecast(cfg.plan_horizon)
        candidates = sample_trajectories(commands[i], cfg.speeds, cfg.curvatures,
                                         cfg.plan_horizon, future_dt(world, cfg),
                                         cfg.kappa_straight)
        bev = world.bev_features()
        traj, idx, breakdowns = select_trajectory(candidates, future, cfg, bev, volume_head)
        if refine is not None and bev is not None:
            traj = bev_refine(traj, commands[i], bev, refine)
        step = traj.waypoints[0]
        action = ActionCondition.trajectory_step(step[0], step[1])
        frame = world.advance(action)
        collided = footprint_collides(frame.semantic, (0.0, 0.0), 0.0, cfg.ego_footprint)
        position = position + step
        executed.append(position.copy())
        steps.append(PlanStep(frame.t, idx, action, traj.waypoints.copy(),
                              tuple(breakdowns), collided, frame))
    return PlanRollout(tuple(steps), Trajectory(np.array(executed), future_dt(world, cfg)))


def future_dt(world, cfg: PlannerConfig) -> float:
    dt = getattr(world, "dt", None)
    return float(dt) if dt is not None else 0.5
