import { describe, expect, it } from "vitest";

import {
  addBranch,
  appendFrame,
  branchById,
  comparableSteps,
  copyPrefix,
  initialState,
} from "../state.js";
import { diffLayer } from "../diff.js";
import { isFramePayload } from "../types.js";
import { makeFrame } from "./helpers.js";

describe("branch timelines", () => {
  it("adds branches and appends frames in step order", () => {
    let s = initialState();
    s = addBranch(s, "a", makeFrame({ step: 0 }));
    s = appendFrame(s, "a", makeFrame({ step: 1 }));
    s = appendFrame(s, "a", makeFrame({ step: 2 }));
    expect(branchById(s, "a")?.frames.length).toBe(3);
    expect(s.displayedStep).toBe(2);
  });

  it("ignores replayed frames already cached", () => {
    let s = initialState();
    s = addBranch(s, "a", makeFrame({ step: 0 }));
    s = appendFrame(s, "a", makeFrame({ step: 1 }));
    s = appendFrame(s, "a", makeFrame({ step: 1 }));
    expect(branchById(s, "a")?.frames.length).toBe(2);
  });

  it("copyPrefix shares the parent's history up to the branch point", () => {
    let s = initialState();
    const f0 = makeFrame({ step: 0 });
    const f1 = makeFrame({ step: 1 });
    f1.bev_labels[0][0] = 3;
    s = addBranch(s, "a", f0);
    s = appendFrame(s, "a", f1);
    s = copyPrefix(s, "a", "b", 1, f0);
    const child = branchById(s, "b")!;
    expect(child.frames.length).toBe(2);
    expect(diffLayer(child.frames[1], f1).count).toBe(0);
    expect(child.parent).toEqual({ id: "a", atStep: 1 });
  });

  it("comparableSteps is the shortest shared prefix", () => {
    let s = initialState();
    s = addBranch(s, "a", makeFrame({ step: 0 }));
    s = appendFrame(s, "a", makeFrame({ step: 1 }));
    s = addBranch(s, "b", makeFrame({ step: 0 }));
    expect(comparableSteps(s, ["a", "b"])).toBe(1);
  });
});

describe("payload guard", () => {
  it("accepts server frames and rejects junk", () => {
    expect(isFramePayload(makeFrame())).toBe(true);
    expect(isFramePayload({ v: 2 })).toBe(false);
    expect(isFramePayload(null)).toBe(false);
    expect(isFramePayload({ code: "bad_action", detail: "x" })).toBe(false);
  });
});
