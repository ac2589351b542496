// Frame stream over the per-session WebSocket channel.

import { isFramePayload, type FramePayload } from "./types.js";

export function connectFrameStream(
  wsBase: string,
  sessionId: string,
  onFrame: (frame: FramePayload) => void,
  onClose?: () => void,
): WebSocket {
  const socket = new WebSocket(`${wsBase}/sessions/${sessionId}/stream`);
  socket.onmessage = (evt) => {
    try {
      const payload = JSON.parse(String(evt.data)) as unknown;
      if (isFramePayload(payload)) onFrame(payload);
    } catch {
      // non-JSON frames are ignored; the HTTP path remains authoritative
    }
  };
  if (onClose) socket.onclose = onClose;
  return socket;
}
