"""World adapters for the closed planning loop and the session service.

Both expose the same surface: plan_forecast(n) yields future semantic
grids in the current ego frame (zero ego-motion conditioning, so
candidate waypoints index them directly), bev_features() yields the
latent map when one exists, and advance(action) applies one ego step and
returns the realized frame.
"""

from __future__ import annotations

import numpy as np

from .actions import ActionCondition
from .config import EngineConfig
from .decoder import (
    MemoryQueue,
    NormContext,
    WorldDecoderParams,
    decode_next,
    memory_push,
    rollout_forecast,
    warmup_memory,
)
from .grid import EgoPose, InstanceGrid, compose, relative_pose
from .neural import channel_to_height_heads, heads_to_grids
from .synthworld import GridFrame, Scenario, ego_motion_from_action, oracle_forecast, rasterize_frame


class OracleWorld:
    """Perfect world model backed by the analytic scenario."""

    def __init__(self, scenario: Scenario, cfg: EngineConfig, t0: int = 0,
                 pose: EgoPose | None = None):
        self.scenario = scenario
        self.cfg = cfg
        self.t = t0
        self.pose = scenario.ego0 if pose is None else pose
        self.dt = scenario.dt

    def current_frame(self) -> GridFrame:
        return rasterize_frame(self.scenario, self.t, self.pose, self.cfg.grid)

    def plan_forecast(self, n: int):
        zero = [ActionCondition.trajectory_step(0.0, 0.0)] * n
        frames = oracle_forecast(self.scenario, self.t, zero, self.cfg.grid, ego_pose=self.pose)
        return [f.semantic for f in frames]

    def bev_features(self):
        return None

    def advance(self, action: ActionCondition) -> GridFrame:
        self.pose = compose(self.pose, ego_motion_from_action(action, self.scenario.dt))
        self.t += 1
        return self.current_frame()


class NeuralWorld:
    """World model backed by the autoregressive decoder.

    The memory is warmed up from scenario observations (the grid-to-BEV
    embedding stands in for a camera encoder); afterwards the world
    evolves purely from its own predictions.
    """

    def __init__(self, scenario: Scenario, cfg: EngineConfig, params: WorldDecoderParams,
                 warmup_frames: int | None = None):
        self.scenario = scenario
        self.cfg = cfg
        self.params = params
        self.dt = scenario.dt
        n_warm = cfg.memory_capacity if warmup_frames is None else warmup_frames
        frames = [rasterize_frame(scenario, t, scenario.ego0, cfg.grid) for t in range(n_warm)]
        self.queue = warmup_memory(frames, params, cfg)
        self.t = n_warm - 1
        self._last_frame = self._frame_from(frames[-1].semantic, frames[-1].flow,
                                            frames[-1].instances, frames[-1].t,
                                            frames[-1].ego_pose_world)

    def _frame_from(self, semantic, flow, instances, t, pose) -> GridFrame:
        return GridFrame(t, semantic, flow, instances, pose)

    def current_frame(self) -> GridFrame:
        return self._last_frame

    @property
    def pose(self) -> EgoPose:
        return self.queue.last.ego_pose_world

    def plan_forecast(self, n: int):
        zero = [[ActionCondition.trajectory_step(0.0, 0.0)]] * n
        steps, _ = rollout_forecast(self.queue, zero, self.params, self.cfg, horizon=n)
        return [s.semantic for s in steps]

    def bev_features(self):
        return self.queue.last.features

    def advance(self, action: ActionCondition) -> GridFrame:
        prev_pose = self.queue.last.ego_pose_world
        e = decode_next(self.queue, [action], self.params, self.cfg)
        logits, flow_raw = channel_to_height_heads(e.features, self.params.heads)
        semantic, flow = heads_to_grids(logits, flow_raw, self.cfg.grid)
        ctx = NormContext(
            sem_gen=self.params.sem_gen,
            ego_gen=self.params.ego_gen,
            agent_gen=self.params.agent_gen,
            ego_motion=relative_pose(prev_pose, e.ego_pose_world),
            flow=flow,
        )
        self.queue = memory_push(self.queue, e, ctx)
        self.t += 1
        self._last_frame = self._frame_from(semantic, flow, InstanceGrid.empty(self.cfg.grid),
                                            e.t, e.ego_pose_world)
        return self._last_frame
