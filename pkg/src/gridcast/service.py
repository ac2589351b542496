"""Session-oriented HTTP/WebSocket API for interactive what-if exploration.

Sessions wrap a world (oracle or neural) built from a scenario file.
Steps apply a user action or delegate to the planner; branching forks an
alternate future by deterministically replaying the parent's action log
up to the branch point (no state is copied, so parents can never be
mutated by children). Frames ship as 2D BEV projections (per-cell
highest-priority category over the column) plus a per-cell mean flow;
the full 3D volume is available base64-encoded on demand.

All message schemas carry "v": 1.
"""

from __future__ import annotations

import base64
import itertools
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from . import __version__
from .actions import ActionCondition
from .config import EngineConfig, desk_config
from .decoder import WorldDecoderParams
from .grid import GMO_CATEGORIES, occupancy_bytes
from .planner import closed_loop_rollout, footprint_collides
from .synthworld import GridFrame, Scenario, load_scenario
from .worlds import NeuralWorld, OracleWorld

SCHEMA_VERSION = 1
WORLD_KINDS = ("oracle", "neural")


def _error(status: int, code: str, detail: str) -> JSONResponse:
    return JSONResponse({"code": code, "detail": detail}, status_code=status)


def frame_payload(frame: GridFrame, step: int, plan: dict | None = None,
                  collided: bool | None = None, full: bool = False) -> dict:
    """Serializable view of one frame. Session-agnostic by design so that
    replays reproduce payloads byte-for-byte."""
    cfg = frame.semantic.config
    labels = frame.semantic.labels
    bev = labels.max(axis=2)
    gmo = np.isin(labels, sorted(GMO_CATEGORIES))
    counts = gmo.sum(axis=2)
    fsum = np.where(gmo[..., None], frame.flow.vectors.astype(np.float64), 0.0).sum(axis=2)
    flow_bev = np.zeros((cfg.h, cfg.w, 2))
    nz = counts > 0
    flow_bev[nz] = fsum[nz, :2] / counts[nz, None]
    payload = {
        "v": SCHEMA_VERSION,
        "step": step,
        "t": frame.t,
        "h": cfg.h,
        "w": cfg.w,
        "resolution": cfg.resolution,
        "x_min": cfg.x_range[0],
        "y_min": cfg.y_range[0],
        "bev_labels": bev.astype(int).tolist(),
        "flow_bev": [[[float(v) for v in cell] for cell in row] for row in flow_bev],
        "ego_pose": {"yaw": frame.ego_pose_world.yaw, "x": frame.ego_pose_world.x,
                     "y": frame.ego_pose_world.y},
        "plan": plan,
        "collided": collided,
    }
    if full:
        payload["grid_b64"] = base64.b64encode(occupancy_bytes(frame.semantic, frame.flow)).decode()
    return payload


def _plan_dict(plan_step) -> dict:
    return {
        "selected_index": plan_step.selected_index,
        "step": [float(v) for v in plan_step.action.values],
        "waypoints": [[float(a), float(b)] for a, b in plan_step.waypoints],
        "costs": [
            {
                "agent": b.agent,
                "road": b.road,
                "volume": b.volume,
                "total": b.total,
                "hard_collision": list(b.hard_collision),
            }
            for b in plan_step.breakdowns
        ],
    }


@dataclass
class Session:
    id: str
    scenario_name: str
    scenario: Scenario
    world_kind: str
    world: object
    cfg: EngineConfig
    frames: list = field(default_factory=list)  # payload per step (step 0 = initial)
    action_log: list = field(default_factory=list)  # request dicts, replayable
    parent: tuple[str, int] | None = None

    @property
    def step(self) -> int:
        return len(self.action_log)


class SessionStore:
    def __init__(self, scenario_dir: Path, cfg: EngineConfig):
        self.scenario_dir = Path(scenario_dir)
        self.cfg = cfg
        self.sessions: dict[str, Session] = {}
        self._counter = itertools.count()

    def _resolve_scenario(self, name: str) -> tuple[str, Scenario]:
        base = Path(name).name
        candidates = [base, f"{base}.json"]
        for cand in candidates:
            path = self.scenario_dir / cand
            if path.exists():
                return cand, load_scenario(path)
        raise FileNotFoundError(f"scenario {name!r} not found in {self.scenario_dir}")

    def _build_world(self, scenario: Scenario, world_kind: str):
        if world_kind == "oracle":
            return OracleWorld(scenario, self.cfg)
        params = WorldDecoderParams.seeded(scenario.seed, self.cfg)
        return NeuralWorld(scenario, self.cfg, params)

    def _new_id(self) -> str:
        return f"s{next(self._counter):04d}-{uuid.uuid4().hex[:8]}"

    def create(self, scenario_name: str, world_kind: str) -> Session:
        if world_kind not in WORLD_KINDS:
            raise ValueError(f"unknown world kind {world_kind!r}")
        resolved, scenario = self._resolve_scenario(scenario_name)
        world = self._build_world(scenario, world_kind)
        session = Session(self._new_id(), resolved, scenario, world_kind, world, self.cfg)
        session.frames.append(frame_payload(world.current_frame(), 0))
        self.sessions[session.id] = session
        return session

    def get(self, session_id: str) -> Session:
        if session_id not in self.sessions:
            raise KeyError(session_id)
        return self.sessions[session_id]

    def apply(self, session: Session, request: dict) -> dict:
        """Apply one step request ({"action": {...}} or {"action":
        "planner", "command": ...}) and append the frame payload."""
        action = request.get("action")
        if action == "planner":
            command = request.get("command", "forward")
            rollout = closed_loop_rollout(session.world, [command], 1, self.cfg.planner)
            plan_step = rollout.steps[0]
            payload = frame_payload(plan_step.frame, session.step + 1,
                                    plan=_plan_dict(plan_step), collided=plan_step.collided)
        else:
            if not isinstance(action, dict):
                raise ValueError("action must be an action object or the string 'planner'")
            cond = ActionCondition.from_json(action)
            frame = session.world.advance(cond)
            collided = footprint_collides(frame.semantic, (0.0, 0.0), 0.0,
                                          self.cfg.planner.ego_footprint)
            payload = frame_payload(frame, session.step + 1, collided=collided)
        session.action_log.append(request)
        session.frames.append(payload)
        return payload

    def branch(self, session_id: str, at_step: int) -> Session:
        parent = self.get(session_id)
        if at_step < 0 or at_step > parent.step:
            raise IndexError(f"branch step {at_step} is beyond the current step {parent.step}")
        world = self._build_world(parent.scenario, parent.world_kind)
        child = Session(self._new_id(), parent.scenario_name, parent.scenario,
                        parent.world_kind, world, self.cfg, parent=(parent.id, at_step))
        child.frames.append(frame_payload(world.current_frame(), 0))
        self.sessions[child.id] = child
        for request in parent.action_log[:at_step]:
            self.apply(child, request)
        return child


def create_app(scenario_dir: Path, cfg: EngineConfig | None = None) -> FastAPI:
    cfg = cfg or desk_config()
    store = SessionStore(scenario_dir, cfg)
    app = FastAPI(title="gridcast session service", version=__version__)
    app.state.store = store
    watchers: dict[str, list] = {}

    async def _notify(session_id: str, payload: dict) -> None:
        for queue in watchers.get(session_id, []):
            queue.put_nowait(payload)

    @app.get("/health")
    async def health():
        return {"status": "ok", "version": __version__, "v": SCHEMA_VERSION}

    @app.post("/sessions")
    async def create_session(body: dict):
        try:
            session = store.create(body.get("scenario", ""), body.get("world", "oracle"))
        except FileNotFoundError as e:
            return _error(404, "not_found", str(e))
        except ValueError as e:
            return _error(400, "bad_request", str(e))
        return {"v": SCHEMA_VERSION, "id": session.id, "frame": session.frames[0]}

    @app.get("/sessions/{session_id}")
    async def session_info(session_id: str):
        try:
            s = store.get(session_id)
        except KeyError:
            return _error(404, "not_found", f"no session {session_id}")
        return {
            "v": SCHEMA_VERSION,
            "id": s.id,
            "scenario": s.scenario_name,
            "world": s.world_kind,
            "step": s.step,
            "parent": {"id": s.parent[0], "at_step": s.parent[1]} if s.parent else None,
        }

    @app.post("/sessions/{session_id}/step")
    async def step_session(session_id: str, body: dict):
        try:
            session = store.get(session_id)
        except KeyError:
            return _error(404, "not_found", f"no session {session_id}")
        try:
            payload = store.apply(session, body)
        except ValueError as e:
            return _error(400, "bad_action", str(e))
        await _notify(session_id, payload)
        return {"v": SCHEMA_VERSION, "frame": payload}

    @app.post("/sessions/{session_id}/branch")
    async def branch_session(session_id: str, body: dict):
        at_step = body.get("at_step")
        if not isinstance(at_step, int):
            return _error(400, "bad_step", "at_step must be an integer")
        try:
            child = store.branch(session_id, at_step)
        except KeyError:
            return _error(404, "not_found", f"no session {session_id}")
        except IndexError as e:
            return _error(400, "bad_step", str(e))
        return {"v": SCHEMA_VERSION, "id": child.id, "frame": child.frames[-1]}

    @app.get("/sessions/{session_id}/frames/{t}")
    async def get_frame(session_id: str, t: int, full: bool = False):
        try:
            session = store.get(session_id)
        except KeyError:
            return _error(404, "not_found", f"no session {session_id}")
        if t < 0 or t >= len(session.frames):
            return _error(404, "not_found", f"no frame {t} (session has {len(session.frames)})")
        payload = session.frames[t]
        if full:
            # rebuild with the full grid attached; the stored payload stays lean
            world = store._build_world(session.scenario, session.world_kind)
            child = Session("tmp", session.scenario_name, session.scenario,
                            session.world_kind, world, cfg)
            child.frames.append(frame_payload(world.current_frame(), 0))
            for request in session.action_log[:t]:
                store.apply(child, request)
            frame = child.world.current_frame()
            payload = dict(payload)
            payload["grid_b64"] = base64.b64encode(
                occupancy_bytes(frame.semantic, frame.flow)).decode()
        return payload

    @app.websocket("/sessions/{session_id}/stream")
    async def stream(websocket: WebSocket, session_id: str):
        import asyncio

        await websocket.accept()
        try:
            session = store.get(session_id)
        except KeyError:
            await websocket.send_json({"code": "not_found", "detail": f"no session {session_id}"})
            await websocket.close()
            return
        queue: asyncio.Queue = asyncio.Queue()
        watchers.setdefault(session_id, []).append(queue)
        try:
            await websocket.send_json(session.frames[-1])
            while True:
                payload = await queue.get()
                await websocket.send_json(payload)
        except WebSocketDisconnect:
            pass
        finally:
            watchers[session_id].remove(queue)

    return app
