// Per-cell difference layer between two frames of branched futures.

import type { FramePayload } from "./types.js";

export interface DiffLayer {
  mask: boolean[][];
  count: number;
}

export function diffLayer(a: FramePayload, b: FramePayload): DiffLayer {
  if (a.h !== b.h || a.w !== b.w) {
    throw new Error(`frame dimensions differ: ${a.h}x${a.w} vs ${b.h}x${b.w}`);
  }
  const mask: boolean[][] = [];
  let count = 0;
  for (let i = 0; i < a.h; i++) {
    const row: boolean[] = [];
    for (let j = 0; j < a.w; j++) {
      const differs = a.bev_labels[i][j] !== b.bev_labels[i][j];
      row.push(differs);
      if (differs) count++;
    }
    mask.push(row);
  }
  return { mask, count };
}

export function emptyDiff(h: number, w: number): DiffLayer {
  return { mask: Array.from({ length: h }, () => Array<boolean>(w).fill(false)), count: 0 };
}
