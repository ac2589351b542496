// DOM wiring for the scenario explorer: create sessions, drive them with
// action forms or the planner, branch alternate futures, and compare
// branches side by side with a difference overlay.

import { SessionApi } from "./api.js";
import { buildStepRequest } from "./actions.js";
import { diffLayer, emptyDiff } from "./diff.js";
import { renderDiffOverlay, renderFrame, type Raster } from "./render.js";
import {
  addBranch,
  appendFrame,
  branchById,
  comparableSteps,
  copyPrefix,
  initialState,
  type ViewState,
} from "./state.js";
import { connectFrameStream } from "./ws.js";
import type { ActionKind, FramePayload } from "./types.js";

const SCALE = 10;

let state: ViewState = initialState();
let api = new SessionApi("http://127.0.0.1:8800");
const sockets = new Map<string, WebSocket>();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function banner(message: string, isError = true): void {
  const box = el<HTMLDivElement>("banner");
  box.textContent = message;
  box.className = isError ? "banner error" : "banner";
  box.style.display = message ? "block" : "none";
}

function blit(canvas: HTMLCanvasElement, raster: Raster): void {
  canvas.width = raster.width;
  canvas.height = raster.height;
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const bytes = new Uint8ClampedArray(raster.data);
  ctx.putImageData(new ImageData(bytes, raster.width, raster.height), 0, 0);
}

function describePlan(frame: FramePayload): string {
  if (!frame.plan) return "";
  const best = frame.plan.costs[frame.plan.selected_index];
  const lines = [
    `selected candidate #${frame.plan.selected_index}  step=(${frame.plan.step
      .map((v) => v.toFixed(2))
      .join(", ")})`,
    `agent=${best.agent.toFixed(3)} road=${best.road.toFixed(3)} ` +
      `volume=${best.volume.toFixed(3)} total=${best.total.toFixed(3)}`,
    `candidates: ${frame.plan.costs.length}, colliding: ${frame.plan.costs.filter((c) =>
      c.hard_collision.some(Boolean)).length}`,
  ];
  return lines.join("\n");
}

function redraw(): void {
  const tiles = el<HTMLDivElement>("tiles");
  tiles.innerHTML = "";
  const ids = state.branches.map((b) => b.id);
  const synced = comparableSteps(state, ids);
  const step = Math.min(state.displayedStep, Math.max(0, synced - 1));
  el<HTMLSpanElement>("step-label").textContent =
    `step ${step}` + (synced ? ` / ${synced - 1}` : "");

  const reference = state.branches[0]?.frames[step];
  state.branches.forEach((branch) => {
    const frame = branch.frames[step];
    const tile = document.createElement("div");
    tile.className = "tile";
    const title = document.createElement("div");
    title.textContent =
      `${branch.label} (${branch.id.slice(0, 9)})` +
      (branch.id === state.activeBranch ? " *" : "") +
      (frame?.collided ? "  COLLIDED" : "");
    tile.appendChild(title);
    const canvas = document.createElement("canvas");
    tile.appendChild(canvas);
    if (frame) {
      const raster = renderFrame(frame, SCALE);
      if (reference && branch !== state.branches[0]) {
        const diff = frame ? diffLayer(reference, frame) : emptyDiff(0, 0);
        renderDiffOverlay(raster, frame, diff.mask, SCALE);
        const diffLabel = document.createElement("div");
        diffLabel.textContent = `diff vs ${state.branches[0].label}: ${diff.count} cells`;
        tile.appendChild(diffLabel);
      }
      blit(canvas, raster);
      const plan = describePlan(frame);
      if (plan) {
        const pre = document.createElement("pre");
        pre.textContent = plan;
        tile.appendChild(pre);
      }
    } else {
      const placeholder = document.createElement("div");
      placeholder.className = "placeholder";
      placeholder.textContent = "no frame at this step";
      tile.appendChild(placeholder);
    }
    tile.onclick = () => {
      state = { ...state, activeBranch: branch.id };
      redraw();
    };
    tiles.appendChild(tile);
  });
}

function watch(sessionId: string): void {
  const wsBase = api.base.replace(/^http/, "ws");
  const socket = connectFrameStream(wsBase, sessionId, (frame) => {
    state = appendFrame(state, sessionId, frame);
    redraw();
  });
  sockets.set(sessionId, socket);
}

async function createSession(): Promise<void> {
  const scenario = el<HTMLInputElement>("scenario").value.trim();
  const world = el<HTMLSelectElement>("world").value as "oracle" | "neural";
  try {
    const resp = await api.createSession(scenario, world);
    state = addBranch(state, resp.id, resp.frame);
    watch(resp.id);
    banner("");
    redraw();
  } catch (e) {
    banner(String(e));
  }
}

function formInputs(): Record<string, unknown> {
  return {
    vx: el<HTMLInputElement>("vx").value,
    vy: el<HTMLInputElement>("vy").value,
    value: el<HTMLInputElement>("scalar").value,
    dx: el<HTMLInputElement>("dx").value,
    dy: el<HTMLInputElement>("dy").value,
    command: el<HTMLSelectElement>("command").value,
  };
}

async function submitAction(kind: ActionKind | "planner"): Promise<void> {
  const branchId = state.activeBranch;
  if (!branchId) {
    banner("create a session first");
    return;
  }
  const inputs = formInputs();
  if (kind === "command") inputs.value = inputs.command;
  const built = buildStepRequest(kind, inputs);
  if (!built.ok) {
    banner(built.error);
    return;
  }
  const button = el<HTMLButtonElement>("go");
  button.disabled = true;
  try {
    const resp = await api.step(branchId, built.body);
    state = appendFrame(state, branchId, resp.frame);
    banner("");
    redraw();
  } catch (e) {
    banner(String(e));
  } finally {
    button.disabled = false;
  }
}

async function branchActive(): Promise<void> {
  const branchId = state.activeBranch;
  if (!branchId) return;
  const branch = branchById(state, branchId);
  if (!branch) return;
  const atStep = Math.min(state.displayedStep, branch.frames.length - 1);
  try {
    const resp = await api.branch(branchId, atStep);
    state = copyPrefix(state, branchId, resp.id, atStep, resp.frame);
    watch(resp.id);
    banner("");
    redraw();
  } catch (e) {
    banner(String(e));
  }
}

export function boot(): void {
  api = new SessionApi(el<HTMLInputElement>("api-base").value);
  el<HTMLInputElement>("api-base").onchange = () => {
    api = new SessionApi(el<HTMLInputElement>("api-base").value);
  };
  el<HTMLButtonElement>("create").onclick = () => void createSession();
  el<HTMLButtonElement>("go").onclick = () => {
    const kind = el<HTMLSelectElement>("action-kind").value as ActionKind;
    void submitAction(kind);
  };
  el<HTMLButtonElement>("plan").onclick = () => void submitAction("planner");
  el<HTMLButtonElement>("branch").onclick = () => void branchActive();
  el<HTMLButtonElement>("back").onclick = () => {
    state = { ...state, displayedStep: Math.max(0, state.displayedStep - 1) };
    redraw();
  };
  el<HTMLButtonElement>("fwd").onclick = () => {
    state = { ...state, displayedStep: state.displayedStep + 1 };
    redraw();
  };
  redraw();
}

if (typeof document !== "undefined") {
  window.addEventListener("DOMContentLoaded", boot);
}
