// View state: branch timelines of server frames. The UI holds no
// simulation truth; this is a display cache keyed by session id.

import type { FramePayload } from "./types.js";

export interface BranchView {
  id: string;
  label: string;
  frames: FramePayload[]; // index = step
  parent?: { id: string; atStep: number };
}

export interface ViewState {
  branches: BranchView[];
  activeBranch: string | null;
  displayedStep: number;
  playbackMode: "manual" | "planner";
}

export function initialState(): ViewState {
  return { branches: [], activeBranch: null, displayedStep: 0, playbackMode: "manual" };
}

export function addBranch(state: ViewState, id: string, frame0: FramePayload,
                          parent?: { id: string; atStep: number }): ViewState {
  const label = parent ? `${parent.id.slice(0, 5)}@${parent.atStep}` : "root";
  const branch: BranchView = { id, label, frames: [frame0], parent };
  return { ...state, branches: [...state.branches, branch], activeBranch: id };
}

export function branchById(state: ViewState, id: string): BranchView | undefined {
  return state.branches.find((b) => b.id === id);
}

export function appendFrame(state: ViewState, branchId: string, frame: FramePayload): ViewState {
  const branches = state.branches.map((b) => {
    if (b.id !== branchId) return b;
    if (frame.step < b.frames.length) return b; // replayed frame already cached
    return { ...b, frames: [...b.frames, frame] };
  });
  const active = branchId === state.activeBranch ? frame.step : state.displayedStep;
  return { ...state, branches, displayedStep: active };
}

export function copyPrefix(state: ViewState, parentId: string, childId: string,
                           atStep: number, childFrame: FramePayload): ViewState {
  const parent = branchById(state, parentId);
  if (!parent) throw new Error(`unknown branch ${parentId}`);
  // the server replays the prefix deterministically; cache what we have
  const frames = parent.frames.slice(0, atStep + 1);
  if (frames.length === 0) frames.push(childFrame);
  const branch: BranchView = {
    id: childId,
    label: `${parentId.slice(0, 5)}@${atStep}`,
    frames,
    parent: { id: parentId, atStep },
  };
  return { ...state, branches: [...state.branches, branch], activeBranch: childId };
}

/** Steps at which every listed branch has a frame (for synchronized
 * side-by-side display). */
export function comparableSteps(state: ViewState, ids: string[]): number {
  const lengths = ids
    .map((id) => branchById(state, id)?.frames.length ?? 0)
    .filter((n) => n > 0);
  return lengths.length ? Math.min(...lengths) : 0;
}
