// Pure rasterization of frame payloads into RGBA buffers. No DOM here:
// the browser blits the result through ImageData, and tests inspect the
// bytes directly.

import type { FramePayload } from "./types.js";

export interface Raster {
  width: number;
  height: number;
  data: Uint8ClampedArray; // RGBA, row-major from the top-left
}

export type Rgb = [number, number, number];

// category palette: free, drivable, static, vehicle, pedestrian
export const CATEGORY_COLORS: Rgb[] = [
  [24, 28, 34],
  [68, 76, 86],
  [150, 118, 62],
  [78, 156, 222],
  [224, 102, 102],
];
export const FLOW_COLOR: Rgb = [250, 220, 80];
export const EGO_COLOR: Rgb = [120, 230, 120];
export const TRAJ_OK_COLOR: Rgb = [120, 230, 120];
export const TRAJ_HIT_COLOR: Rgb = [240, 80, 80];
export const FLOW_ARROW_STRIDE = 4; // at most one arrow per 4x4 cell block

export function makeRaster(width: number, height: number): Raster {
  return { width, height, data: new Uint8ClampedArray(width * height * 4) };
}

export function putPixel(r: Raster, x: number, y: number, c: Rgb): void {
  if (x < 0 || y < 0 || x >= r.width || y >= r.height) return;
  const o = (y * r.width + x) * 4;
  r.data[o] = c[0];
  r.data[o + 1] = c[1];
  r.data[o + 2] = c[2];
  r.data[o + 3] = 255;
}

export function pixelAt(r: Raster, x: number, y: number): Rgb {
  const o = (y * r.width + x) * 4;
  return [r.data[o], r.data[o + 1], r.data[o + 2]];
}

export function drawLine(r: Raster, x0: number, y0: number, x1: number, y1: number, c: Rgb): void {
  // Bresenham
  let [xa, ya] = [Math.round(x0), Math.round(y0)];
  const [xb, yb] = [Math.round(x1), Math.round(y1)];
  const dx = Math.abs(xb - xa);
  const dy = -Math.abs(yb - ya);
  const sx = xa < xb ? 1 : -1;
  const sy = ya < yb ? 1 : -1;
  let err = dx + dy;
  for (;;) {
    putPixel(r, xa, ya, c);
    if (xa === xb && ya === yb) break;
    const e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      xa += sx;
    }
    if (e2 <= dx) {
      err += dx;
      ya += sy;
    }
  }
}

// Grid cell (i along +x forward, j along +y left) -> pixel block. The
// screen shows +x up and +y to the left, so row 0 lands at the bottom.
export function cellToPixel(frame: FramePayload, i: number, j: number, scale: number): [number, number] {
  return [(frame.w - 1 - j) * scale, (frame.h - 1 - i) * scale];
}

export function metersToPixel(frame: FramePayload, x: number, y: number, scale: number): [number, number] {
  const i = (x - frame.x_min) / frame.resolution - 0.5;
  const j = (y - frame.y_min) / frame.resolution - 0.5;
  return [(frame.w - 1 - j) * scale + scale / 2, (frame.h - 1 - i) * scale + scale / 2];
}

function fillCell(r: Raster, frame: FramePayload, i: number, j: number, scale: number, c: Rgb): void {
  const [px, py] = cellToPixel(frame, i, j, scale);
  for (let dy = 0; dy < scale; dy++) {
    for (let dx = 0; dx < scale; dx++) {
      putPixel(r, px + dx, py + dy, c);
    }
  }
}

function drawFlowArrows(r: Raster, frame: FramePayload, scale: number): void {
  for (let i = 0; i < frame.h; i += FLOW_ARROW_STRIDE) {
    for (let j = 0; j < frame.w; j += FLOW_ARROW_STRIDE) {
      // pick the strongest flow cell in the block so thin movers still show
      let best: [number, number] | null = null;
      let bestMag = 1e-6;
      for (let di = 0; di < FLOW_ARROW_STRIDE && i + di < frame.h; di++) {
        for (let dj = 0; dj < FLOW_ARROW_STRIDE && j + dj < frame.w; dj++) {
          const [fx, fy] = frame.flow_bev[i + di][j + dj];
          const mag = Math.hypot(fx, fy);
          if (mag > bestMag) {
            bestMag = mag;
            best = [i + di, j + dj];
          }
        }
      }
      if (!best) continue;
      const [ci, cj] = best;
      const [fx, fy] = frame.flow_bev[ci][cj];
      const [px, py] = cellToPixel(frame, ci, cj, scale);
      const cx = px + scale / 2;
      const cy = py + scale / 2;
      const len = Math.min(2 * scale, (bestMag / frame.resolution) * scale);
      // +x (forward) is up, +y (left) is screen-left
      const tx = cx - (fy / bestMag) * len;
      const ty = cy - (fx / bestMag) * len;
      drawLine(r, cx, cy, tx, ty, FLOW_COLOR);
    }
  }
}

function drawEgoFootprint(r: Raster, frame: FramePayload, scale: number): void {
  // ego sits at the frame origin, footprint 4.0 x 1.8 m, heading +x
  const hl = 2.0;
  const hw = 0.9;
  const corners: [number, number][] = [
    [hl, hw],
    [hl, -hw],
    [-hl, -hw],
    [-hl, hw],
  ];
  for (let k = 0; k < 4; k++) {
    const [x0, y0] = corners[k];
    const [x1, y1] = corners[(k + 1) % 4];
    const [px0, py0] = metersToPixel(frame, x0, y0, scale);
    const [px1, py1] = metersToPixel(frame, x1, y1, scale);
    drawLine(r, px0, py0, px1, py1, EGO_COLOR);
  }
}

function drawTrajectory(r: Raster, frame: FramePayload, scale: number): void {
  if (!frame.plan) return;
  const plan = frame.plan;
  const hard = plan.costs[plan.selected_index]?.hard_collision ?? [];
  let [px, py] = metersToPixel(frame, 0, 0, scale);
  plan.waypoints.forEach((wp, k) => {
    const [nx, ny] = metersToPixel(frame, wp[0], wp[1], scale);
    drawLine(r, px, py, nx, ny, hard[k] ? TRAJ_HIT_COLOR : TRAJ_OK_COLOR);
    px = nx;
    py = ny;
  });
}

/** Render one frame payload into an RGBA raster of (w*scale, h*scale). */
export function renderFrame(frame: FramePayload, scale = 8): Raster {
  const raster = makeRaster(frame.w * scale, frame.h * scale);
  for (let i = 0; i < frame.h; i++) {
    for (let j = 0; j < frame.w; j++) {
      const cat = frame.bev_labels[i][j];
      fillCell(raster, frame, i, j, scale, CATEGORY_COLORS[cat] ?? CATEGORY_COLORS[0]);
    }
  }
  drawFlowArrows(raster, frame, scale);
  drawEgoFootprint(raster, frame, scale);
  drawTrajectory(raster, frame, scale);
  return raster;
}

/** Overlay a difference mask (from diff.ts) onto a rendered raster. */
export function renderDiffOverlay(raster: Raster, frame: FramePayload, mask: boolean[][], scale = 8): void {
  const highlight: Rgb = [255, 64, 200];
  for (let i = 0; i < frame.h; i++) {
    for (let j = 0; j < frame.w; j++) {
      if (!mask[i][j]) continue;
      const [px, py] = cellToPixel(frame, i, j, scale);
      for (let d = 0; d < scale; d++) {
        putPixel(raster, px + d, py, highlight);
        putPixel(raster, px + d, py + scale - 1, highlight);
        putPixel(raster, px, py + d, highlight);
        putPixel(raster, px + scale - 1, py + d, highlight);
      }
    }
  }
}
