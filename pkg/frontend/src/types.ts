// Wire schema (v1) of the gridcast session service.

export const SCHEMA_VERSION = 1;

export interface EgoPose {
  yaw: number;
  x: number;
  y: number;
}

export interface CandidateCost {
  agent: number;
  road: number;
  volume: number;
  total: number;
  hard_collision: boolean[];
}

export interface PlanInfo {
  selected_index: number;
  step: number[];
  waypoints: number[][];
  costs: CandidateCost[];
}

export interface FramePayload {
  v: number;
  step: number;
  t: number;
  h: number;
  w: number;
  resolution: number;
  x_min: number;
  y_min: number;
  bev_labels: number[][];
  flow_bev: number[][][];
  ego_pose: EgoPose;
  plan: PlanInfo | null;
  collided: boolean | null;
  grid_b64?: string;
}

export interface ErrorPayload {
  code: string;
  detail: string;
}

export interface CreateResponse {
  v: number;
  id: string;
  frame: FramePayload;
}

export interface StepResponse {
  v: number;
  frame: FramePayload;
}

export interface BranchResponse {
  v: number;
  id: string;
  frame: FramePayload;
}

export type ActionKind = "velocity" | "curvature" | "trajectory_step" | "command";

export type ActionBody =
  | { kind: "velocity"; vx: number; vy: number }
  | { kind: "curvature"; value: number }
  | { kind: "trajectory_step"; dx: number; dy: number }
  | { kind: "command"; value: "forward" | "left" | "right" };

export type StepRequest =
  | { action: ActionBody }
  | { action: "planner"; command?: "forward" | "left" | "right" };

export function isFramePayload(x: unknown): x is FramePayload {
  if (typeof x !== "object" || x === null) return false;
  const f = x as Record<string, unknown>;
  return (
    f.v === SCHEMA_VERSION &&
    typeof f.h === "number" &&
    typeof f.w === "number" &&
    Array.isArray(f.bev_labels) &&
    Array.isArray(f.flow_bev) &&
    typeof f.ego_pose === "object"
  );
}
