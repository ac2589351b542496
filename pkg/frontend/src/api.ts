// Thin HTTP client over the session endpoints. No recomputation happens
// client-side: every displayed number comes from these payloads verbatim.

import type {
  BranchResponse,
  CreateResponse,
  ErrorPayload,
  FramePayload,
  StepRequest,
  StepResponse,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public payload: ErrorPayload,
  ) {
    super(`${payload.code}: ${payload.detail}`);
  }
}

async function request<T>(base: string, method: string, path: string, body?: unknown): Promise<T> {
  const resp = await fetch(`${base}${path}`, {
    method,
    headers: body !== undefined ? { "Content-Type": "application/json" } : undefined,
    body: body !== undefined ? JSON.stringify(body) : undefined,
  });
  const data = (await resp.json()) as unknown;
  if (!resp.ok) {
    throw new ApiError(resp.status, data as ErrorPayload);
  }
  return data as T;
}

export class SessionApi {
  constructor(public base: string) {}

  health(): Promise<{ status: string; version: string }> {
    return request(this.base, "GET", "/health");
  }

  createSession(scenario: string, world: "oracle" | "neural"): Promise<CreateResponse> {
    return request(this.base, "POST", "/sessions", { scenario, world });
  }

  step(sessionId: string, body: StepRequest): Promise<StepResponse> {
    return request(this.base, "POST", `/sessions/${sessionId}/step`, body);
  }

  branch(sessionId: string, atStep: number): Promise<BranchResponse> {
    return request(this.base, "POST", `/sessions/${sessionId}/branch`, { at_step: atStep });
  }

  frame(sessionId: string, t: number, full = false): Promise<FramePayload> {
    const q = full ? "?full=true" : "";
    return request(this.base, "GET", `/sessions/${sessionId}/frames/${t}${q}`);
  }
}
