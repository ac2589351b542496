// Client-side validation of the action form and step-request building.
// Invalid input never produces a request.

import type { ActionKind, StepRequest } from "./types.js";

export const SPEED_LIMIT = 5.0; // m/s per axis
export const CURVATURE_LIMIT = 0.2; // 1/m
export const STEP_LIMIT = 3.0; // m per axis per step
export const COMMANDS = ["forward", "left", "right"] as const;

export type BuildResult = { ok: true; body: StepRequest } | { ok: false; error: string };

function finiteIn(value: number, limit: number, name: string): string | null {
  if (!Number.isFinite(value)) return `${name} must be a finite number`;
  if (Math.abs(value) > limit) return `${name} must be within +/-${limit}`;
  return null;
}

export function buildStepRequest(kind: ActionKind | "planner", inputs: Record<string, unknown>): BuildResult {
  if (kind === "planner") {
    const command = (inputs.command as string) ?? "forward";
    if (!COMMANDS.includes(command as (typeof COMMANDS)[number])) {
      return { ok: false, error: `unknown command '${command}'` };
    }
    return { ok: true, body: { action: "planner", command: command as (typeof COMMANDS)[number] } };
  }
  if (kind === "velocity") {
    const vx = Number(inputs.vx);
    const vy = Number(inputs.vy);
    const err = finiteIn(vx, SPEED_LIMIT, "vx") ?? finiteIn(vy, SPEED_LIMIT, "vy");
    if (err) return { ok: false, error: err };
    return { ok: true, body: { action: { kind: "velocity", vx, vy } } };
  }
  if (kind === "curvature") {
    const value = Number(inputs.value);
    const err = finiteIn(value, CURVATURE_LIMIT, "curvature");
    if (err) return { ok: false, error: err };
    return { ok: true, body: { action: { kind: "curvature", value } } };
  }
  if (kind === "trajectory_step") {
    const dx = Number(inputs.dx);
    const dy = Number(inputs.dy);
    const err = finiteIn(dx, STEP_LIMIT, "dx") ?? finiteIn(dy, STEP_LIMIT, "dy");
    if (err) return { ok: false, error: err };
    return { ok: true, body: { action: { kind: "trajectory_step", dx, dy } } };
  }
  if (kind === "command") {
    const value = inputs.value as string;
    if (!COMMANDS.includes(value as (typeof COMMANDS)[number])) {
      return { ok: false, error: `unknown command '${value}'` };
    }
    return { ok: true, body: { action: { kind: "command", value: value as (typeof COMMANDS)[number] } } };
  }
  return { ok: false, error: `unknown action kind '${kind}'` };
}
