"""Command-line entry point.

Subcommands: gen (scenario synthesis), rollout (closed-loop planning or
open-loop forecasting with either world), eval (metric report over dump
directories), serve (session API). stdout carries machine-readable JSON
only; diagnostics go to stderr. Exit codes: 0 ok, 2 usage, 3 I/O,
4 validation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .actions import ActionCondition
from .config import EngineConfig, config_from_dict, config_to_dict, desk_config, load_config
from .decoder import WorldDecoderParams
from .grid import load_occupancy, save_occupancy
from .metrics import build_report, l2_error
from .neural import load_checkpoint, replace_tensors
from .planner import closed_loop_rollout
from .synthworld import (
    generate_random_scenario,
    load_scenario,
    save_scenario,
    scenario_from_json,
    scenario_to_json,
)
from .worlds import NeuralWorld, OracleWorld

MANIFEST_VERSION = 1


def _json_out(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


def _err(msg: str) -> None:
    print(f"gridcast: {msg}", file=sys.stderr)


def _load_engine_config(args) -> EngineConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return desk_config()


def cmd_gen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(args.count):
        scn = generate_random_scenario(args.seed + i, args.difficulty)
        path = out / f"scenario_{i:03d}.json"
        save_scenario(path, scn)
        written.append(str(path))
    _json_out({"written": written, "seed": args.seed, "difficulty": args.difficulty})
    return 0


def _build_world(kind: str, scenario, cfg: EngineConfig, checkpoint: str | None,
                 checkpoint_seed: int | None):
    if kind == "oracle":
        return OracleWorld(scenario, cfg), None
    seed = scenario.seed if checkpoint_seed is None else checkpoint_seed
    params = WorldDecoderParams.seeded(seed, cfg)
    if checkpoint:
        params = replace_tensors(params, load_checkpoint(checkpoint))
    else:
        _err(f"neural world: using seeded random checkpoint (seed={seed})")
    return NeuralWorld(scenario, cfg, params), seed


def _parse_actions_source(spec: str):
    if spec == "planner":
        return {"source": "planner"}
    if spec.startswith("file:"):
        return {"source": "file", "path": spec[5:]}
    if spec.startswith("command:"):
        return {"source": "command", "command": spec[8:]}
    raise ValueError(f"unknown actions source {spec!r} (use planner, file:PATH, command:NAME)")


def _load_action_records(path) -> list[ActionCondition]:
    with open(path) as f:
        data = json.load(f)
    records = data["actions"] if isinstance(data, dict) else data
    if not isinstance(records, list):
        raise ValueError("actions file must hold a list of action records")
    out = []
    for i, rec in enumerate(records):
        try:
            out.append(ActionCondition.from_json(rec))
        except ValueError as e:
            raise ValueError(f"actions file record {i}: {e}") from e
    return out


def run_rollout(scenario, cfg: EngineConfig, world_kind: str, actions_spec: dict,
                horizon: int, out_dir: Path, checkpoint: str | None = None,
                checkpoint_seed: int | None = None, command: str = "forward") -> dict:
    """Execute a rollout and write grid dumps, the plan trace, and the
    manifest. Returns the manifest dict."""
    out_dir.mkdir(parents=True, exist_ok=True)
    world, used_seed = _build_world(world_kind, scenario, cfg, checkpoint, checkpoint_seed)

    frames = []
    trace_path = None
    action_records = None
    if actions_spec["source"] == "planner":
        rollout = closed_loop_rollout(world, [command], horizon, cfg.planner)
        trace_path = out_dir / "plan_trace.jsonl"
        with open(trace_path, "w") as f:
            for step, pos in zip(rollout.steps, rollout.executed.waypoints):
                rec = {
                    "t": step.t,
                    "selected_index": step.selected_index,
                    "action": step.action.to_json(),
                    "waypoints": [list(map(float, wp)) for wp in step.waypoints],
                    "position": [float(pos[0]), float(pos[1])],
                    "collided": bool(step.collided),
                    "costs": [
                        {
                            "agent": b.agent,
                            "road": b.road,
                            "volume": b.volume,
                            "total": b.total,
                            "hard_collision": list(b.hard_collision),
                        }
                        for b in step.breakdowns
                    ],
                }
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        frames = [step.frame for step in rollout.steps]
    else:
        if actions_spec["source"] == "file":
            if "records" in actions_spec and actions_spec["records"] is not None:
                actions = [ActionCondition.from_json(r) for r in actions_spec["records"]]
            else:
                actions = _load_action_records(actions_spec["path"])
            if len(actions) < horizon:
                raise ValueError(f"actions file has {len(actions)} records, horizon is {horizon}")
            actions = actions[:horizon]
        else:
            actions = [ActionCondition.command(actions_spec["command"])] * horizon
        action_records = [a.to_json() for a in actions]
        frames = [world.advance(a) for a in actions]

    frame_names = []
    step_records = []
    applied = ([s.action for s in rollout.steps] if actions_spec["source"] == "planner"
               else actions)
    for i, (frame, action) in enumerate(zip(frames, applied)):
        name = f"frame_{i:04d}.occ"
        save_occupancy(out_dir / name, frame.semantic, frame.flow)
        frame_names.append(name)
        pose = frame.ego_pose_world
        step_records.append({
            "step": i,
            "t": frame.t,
            "action": action.to_json(),
            "ego_pose": {"yaw": pose.yaw, "x": pose.x, "y": pose.y},
            "frame": name,
        })

    manifest = {
        "v": MANIFEST_VERSION,
        "tool_version": __version__,
        "world": world_kind,
        "horizon": horizon,
        "command": command,
        "checkpoint_seed": used_seed,
        "checkpoint_file": checkpoint,
        "actions": {
            "source": actions_spec["source"],
            "command": actions_spec.get("command"),
            "records": action_records,
        },
        "config": config_to_dict(cfg),
        "scenario": scenario_to_json(scenario),
        "outputs": {
            "frames": frame_names,
            "plan_trace": trace_path.name if trace_path else None,
        },
        "steps": step_records,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest


def cmd_rollout(args) -> int:
    if args.from_manifest:
        with open(args.from_manifest) as f:
            manifest = json.load(f)
        cfg = config_from_dict(manifest["config"])
        scenario = scenario_from_json(manifest["scenario"])
        spec = dict(manifest["actions"])
        if spec["source"] == "command":
            spec.setdefault("command", manifest.get("command"))
        run_rollout(scenario, cfg, manifest["world"], spec, manifest["horizon"],
                    Path(args.out), manifest.get("checkpoint_file"),
                    manifest.get("checkpoint_seed"), manifest.get("command", "forward"))
    else:
        if not args.scenario:
            raise ValueError("either --scenario or --from-manifest is required")
        scenario = load_scenario(args.scenario)
        cfg = _load_engine_config(args)
        spec = _parse_actions_source(args.actions)
        run_rollout(scenario, cfg, args.world, spec, args.horizon, Path(args.out),
                    args.checkpoint, None, args.command)
    _json_out({"out": args.out})
    return 0


def _load_frames(dir_path: Path):
    paths = sorted(dir_path.glob("frame_*.occ"))
    sems, flows = [], []
    for p in paths:
        s, f = load_occupancy(p)
        sems.append(s)
        flows.append(f)
    return sems, flows


def _load_trace(dir_path: Path):
    path = dir_path / "plan_trace.jsonl"
    if not path.exists():
        return None
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    pred_sem, pred_flow = _load_frames(pred_dir)
    gt_sem, gt_flow = _load_frames(gt_dir)
    if not pred_sem or len(pred_sem) != len(gt_sem):
        raise ValueError(f"frame count mismatch: {len(pred_sem)} predictions vs {len(gt_sem)} ground truth")
    if pred_sem[0].config != gt_sem[0].config:
        raise ValueError("prediction and ground-truth grid configs differ")
    cfg = _load_engine_config(args)
    pred_flow = pred_flow if all(f is not None for f in pred_flow) else None
    gt_flow = gt_flow if all(f is not None for f in gt_flow) else None
    report = build_report(pred_sem, pred_flow, gt_sem, gt_flow, None, cfg.eval)

    pred_trace = _load_trace(pred_dir)
    gt_trace = _load_trace(gt_dir)
    if pred_trace and gt_trace and len(pred_trace) == len(gt_trace):
        p = np.array([r["position"] for r in pred_trace])
        e = np.array([r["position"] for r in gt_trace])
        report["L2"] = {
            "NoAvg": [float(v) for v in l2_error(p, e, "NoAvg")],
            "TemAvg": [float(v) for v in l2_error(p, e, "TemAvg")],
        }
    if pred_trace:
        flags = np.array([1.0 if r["collided"] else 0.0 for r in pred_trace])
        report["CR"] = {
            "stepwise": [float(v) for v in flags],
            "cumulative": [float(v) for v in np.maximum.accumulate(flags)],
        }
    _json_out(report)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    cfg = _load_engine_config(args)
    app = create_app(Path(args.scenarios), cfg)
    try:
        uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    except (OSError, SystemExit) as e:
        raise OSError(f"server failed to start on port {args.port}: {e}") from e
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcast",
                                     description="4D occupancy forecasting and planning engine")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command_name", required=True)

    p = sub.add_parser("gen", help="generate random scenarios")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--difficulty", choices=("sparse", "dense", "corridor"), default="sparse")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("rollout", help="run a forecasting / planning rollout")
    p.add_argument("--scenario")
    p.add_argument("--from-manifest", dest="from_manifest")
    p.add_argument("--world", choices=("oracle", "neural"), default="oracle")
    p.add_argument("--actions", default="planner",
                   help="planner | file:PATH | command:NAME")
    p.add_argument("--command", default="forward", help="command schedule for planner mode")
    p.add_argument("--horizon", type=int, default=4)
    p.add_argument("--checkpoint", help="weight checkpoint for the neural world")
    p.add_argument("--config", help="JSON engine-config overrides")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="evaluate prediction dumps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--config", help="JSON engine-config overrides")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve the interactive session API")
    p.add_argument("--port", type=int, default=8800)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--scenarios", required=True, help="directory of scenario JSON files")
    p.add_argument("--config", help="JSON engine-config overrides")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as e:
        _err(str(e))
        return 3
    except ValueError as e:
        _err(str(e))
        return 4


if __name__ == "__main__":
    sys.exit(main())
