import type { FramePayload } from "../types.js";

export function makeFrame(overrides: Partial<FramePayload> = {}): FramePayload {
  const h = overrides.h ?? 8;
  const w = overrides.w ?? 8;
  return {
    v: 1,
    step: 0,
    t: 0,
    h,
    w,
    resolution: 0.5,
    x_min: -(h * 0.5) / 2,
    y_min: -(w * 0.5) / 2,
    bev_labels: Array.from({ length: h }, () => Array<number>(w).fill(0)),
    flow_bev: Array.from({ length: h }, () => Array.from({ length: w }, () => [0, 0])),
    ego_pose: { yaw: 0, x: 0, y: 0 },
    plan: null,
    collided: null,
    ...overrides,
  };
}
