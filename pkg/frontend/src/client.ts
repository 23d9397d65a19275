/** Render-socket client: sends camera poses, paints streamed frames.
 *
 * Flow control is latest-wins on both ends: at most one pose is ever
 * unanswered on the wire, newer camera updates overwrite the waiting one,
 * and a received frame older than the last painted frame is dropped.
 */

import {
  FLAG_ZERO_COVERAGE,
  FrameMessage,
  encodePoseMessage,
  parseFrame,
  parseServerText,
} from "./protocol.js";

export interface ViewerSocket {
  send(text: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((data: string | ArrayBuffer) => void) | null;
  onclose: (() => void) | null;
}

export type SocketFactory = () => ViewerSocket;

export interface HudState {
  connected: boolean;
  fps: number;
  latencyMs: number;
  renderMs: number;
  zeroCoverage: boolean;
  droppedStale: number;
  lastFid: number;
  lastError: string;
}

export interface ClientOptions {
  socketFactory: SocketFactory;
  /** Decode and draw one accepted frame. */
  paint: (frame: FrameMessage) => void;
  onHud?: (hud: Readonly<HudState>) => void;
  now?: () => number;
  schedule?: (fn: () => void, ms: number) => void;
  reconnectBaseMs?: number;
  reconnectMaxMs?: number;
}

interface PendingPose {
  fid: number;
  R: number[];
  T: number[];
}

export class ViewerClient {
  readonly hud: HudState = {
    connected: false,
    fps: 0,
    latencyMs: 0,
    renderMs: 0,
    zeroCoverage: false,
    droppedStale: 0,
    lastFid: -1,
    lastError: "",
  };

  private readonly opts: Required<Pick<ClientOptions, "socketFactory" | "paint">> &
    ClientOptions;
  private readonly now: () => number;
  private readonly schedule: (fn: () => void, ms: number) => void;
  private socket: ViewerSocket | null = null;
  private inFlight: number | null = null;
  private pending: PendingPose | null = null;
  private lastRequested: PendingPose | null = null;
  private lastPainted = -1;
  private lastPaintTime = 0;
  private sendTimes = new Map<number, number>();
  private backoffMs: number;
  private stopped = false;

  constructor(options: ClientOptions) {
    this.opts = options;
    this.now = options.now ?? (() => Date.now());
    this.schedule = options.schedule ?? ((fn, ms) => setTimeout(fn, ms));
    this.backoffMs = options.reconnectBaseMs ?? 500;
  }

  start(): void {
    this.stopped = false;
    this.connect();
  }

  stop(): void {
    this.stopped = true;
    this.socket?.close();
    this.socket = null;
  }

  /** Queue a camera pose. Newer calls overwrite an unsent queued pose. */
  request(fid: number, R: number[], T: number[]): void {
    const pose = { fid, R, T };
    this.lastRequested = pose;
    if (!this.hud.connected || this.inFlight !== null) {
      this.pending = pose;
      return;
    }
    this.sendPose(pose);
  }

  private connect(): void {
    const socket = this.opts.socketFactory();
    this.socket = socket;
    socket.onopen = () => {
      this.hud.connected = true;
      this.backoffMs = this.opts.reconnectBaseMs ?? 500;
      this.publishHud();
      // Repaint the current camera after a reconnect.
      if (this.pending === null && this.lastRequested !== null) {
        this.pending = this.lastRequested;
      }
      this.flushPending();
    };
    socket.onmessage = (data) => this.handleMessage(data);
    socket.onclose = () => {
      this.hud.connected = false;
      this.inFlight = null;
      this.sendTimes.clear();
      this.publishHud();
      if (this.stopped) {
        return;
      }
      const delay = this.backoffMs;
      this.backoffMs = Math.min(this.backoffMs * 2,
        this.opts.reconnectMaxMs ?? 8000);
      this.schedule(() => {
        if (!this.stopped) {
          this.connect();
        }
      }, delay);
    };
  }

  private sendPose(pose: PendingPose): void {
    if (this.socket === null) {
      this.pending = pose;
      return;
    }
    this.inFlight = pose.fid;
    this.sendTimes.set(pose.fid, this.now());
    this.socket.send(encodePoseMessage(pose.fid, pose.R, pose.T));
  }

  private flushPending(): void {
    if (this.inFlight === null && this.pending !== null && this.hud.connected) {
      const pose = this.pending;
      this.pending = null;
      this.sendPose(pose);
    }
  }

  private handleMessage(data: string | ArrayBuffer): void {
    if (typeof data === "string") {
      this.handleText(data);
      return;
    }
    let frame: FrameMessage;
    try {
      frame = parseFrame(data);
    } catch (err) {
      this.hud.lastError = String(err);
      this.publishHud();
      return;
    }
    if (this.inFlight !== null && frame.fid === this.inFlight) {
      this.inFlight = null;
    }
    const sent = this.sendTimes.get(frame.fid);
    if (sent !== undefined) {
      this.hud.latencyMs = this.now() - sent;
      this.sendTimes.delete(frame.fid);
    }
    if (frame.fid < this.lastPainted) {
      this.hud.droppedStale += 1;
      this.publishHud();
      this.flushPending();
      return;
    }
    this.lastPainted = frame.fid;
    this.hud.lastFid = frame.fid;
    this.hud.zeroCoverage = (frame.flags & FLAG_ZERO_COVERAGE) !== 0;
    const t = this.now();
    if (this.lastPaintTime > 0 && t > this.lastPaintTime) {
      const instant = 1000 / (t - this.lastPaintTime);
      this.hud.fps = this.hud.fps === 0
        ? instant
        : 0.8 * this.hud.fps + 0.2 * instant;
    }
    this.lastPaintTime = t;
    this.opts.paint(frame);
    this.publishHud();
    this.flushPending();
  }

  private handleText(text: string): void {
    let msg;
    try {
      msg = parseServerText(text);
    } catch (err) {
      this.hud.lastError = String(err);
      this.publishHud();
      return;
    }
    if (msg.type === "stats") {
      this.hud.renderMs = msg.render_ms;
    } else {
      this.hud.lastError = `server error ${msg.code}: ${msg.msg}`;
      // The rejected pose will never be answered with a frame.
      this.inFlight = null;
      this.flushPending();
    }
    this.publishHud();
  }

  private publishHud(): void {
    this.opts.onHud?.(this.hud);
  }
}
