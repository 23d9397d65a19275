/** Wire protocol for the render socket.
 *
 * Client -> server: compact JSON text messages ("pose", "config").
 * Server -> client: binary frames (16-byte header + PNG payload) interleaved
 * with JSON text messages ("stats" after every frame, "error" on rejects).
 */

export const FRAME_MAGIC = "FWDF";
export const FRAME_HEADER_BYTES = 16;

export const FLAG_ZERO_COVERAGE = 1;

export const ERR_BAD_JSON = 1;
export const ERR_BAD_FIELD = 2;
export const ERR_RENDER = 3;

export interface FrameMessage {
  fid: number;
  flags: number;
  payload: Uint8Array;
}

export interface StatsMessage {
  type: "stats";
  fid: number;
  render_ms: number;
}

export interface ErrorMessage {
  type: "error";
  code: number;
  msg: string;
}

export type ServerTextMessage = StatsMessage | ErrorMessage;

function requireNumbers(values: ArrayLike<number>, n: number, name: string): number[] {
  if (values.length !== n) {
    throw new Error(`${name} must have ${n} numbers, got ${values.length}`);
  }
  const out: number[] = [];
  for (let i = 0; i < n; i++) {
    const x = Number(values[i]);
    if (!Number.isFinite(x)) {
      throw new Error(`${name}[${i}] must be finite`);
    }
    out.push(x);
  }
  return out;
}

/** Camera update. R is a row-major camera-from-world rotation, T the
 * translation of the same map; fid echoes back on the matching frame. */
export function encodePoseMessage(
  fid: number,
  R: ArrayLike<number>,
  T: ArrayLike<number>,
): string {
  if (!Number.isInteger(fid) || fid < 0) {
    throw new Error("fid must be a nonnegative integer");
  }
  return JSON.stringify({
    type: "pose",
    fid,
    R: requireNumbers(R, 9, "R"),
    T: requireNumbers(T, 3, "T"),
  });
}

/** Per-connection render settings (blend depth, model variant). */
export function encodeConfigMessage(kBlend: number, variant: string): string {
  if (!Number.isInteger(kBlend) || kBlend < 1) {
    throw new Error("k_blend must be a positive integer");
  }
  return JSON.stringify({ type: "config", k_blend: kBlend, variant });
}

/** Split a binary frame into header fields and the PNG payload. */
export function parseFrame(data: ArrayBuffer): FrameMessage {
  const bytes = new Uint8Array(data);
  if (bytes.length < FRAME_HEADER_BYTES) {
    throw new Error("frame too short for its header");
  }
  for (let i = 0; i < 4; i++) {
    if (bytes[i] !== FRAME_MAGIC.charCodeAt(i)) {
      throw new Error("not a frame message (bad magic)");
    }
  }
  const view = new DataView(data);
  const fidBig = view.getBigUint64(4, true);
  if (fidBig > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new Error("frame id exceeds the safe integer range");
  }
  return {
    fid: Number(fidBig),
    flags: view.getUint32(12, true),
    payload: bytes.subarray(FRAME_HEADER_BYTES),
  };
}

/** Validate one server text message (stats or error). */
export function parseServerText(text: string): ServerTextMessage {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch {
    throw new Error("malformed server text message");
  }
  if (typeof raw !== "object" || raw === null || Array.isArray(raw)) {
    throw new Error("server text message must be a JSON object");
  }
  const msg = raw as Record<string, unknown>;
  if (msg.type === "stats") {
    if (typeof msg.fid !== "number" || typeof msg.render_ms !== "number") {
      throw new Error("stats message needs numeric fid and render_ms");
    }
    return { type: "stats", fid: msg.fid, render_ms: msg.render_ms };
  }
  if (msg.type === "error") {
    if (typeof msg.code !== "number" || typeof msg.msg !== "string") {
      throw new Error("error message needs a numeric code and a msg string");
    }
    return { type: "error", code: msg.code, msg: msg.msg };
  }
  throw new Error(`unknown server message type: ${String(msg.type)}`);
}
