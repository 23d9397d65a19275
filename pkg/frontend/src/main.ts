/** Browser entry point: wires the orbit controls, the render socket client,
 * and the HUD to the DOM. Served by `fwdsynth serve --static`. */

import { ViewerClient, ViewerSocket } from "./client.js";
import { OrbitState, clampOrbit, orbitFromHint, orbitToPose } from "./orbit.js";

interface Meta {
  scene: string;
  resolution: [number, number];
  orbit: { azimuth: number; elevation: number; distance: number; target?: number[] };
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function browserSocket(url: string): ViewerSocket {
  const ws = new WebSocket(url);
  ws.binaryType = "arraybuffer";
  const wrapped: ViewerSocket = {
    send: (text) => ws.send(text),
    close: () => ws.close(),
    onopen: null,
    onmessage: null,
    onclose: null,
  };
  ws.onopen = () => wrapped.onopen?.();
  ws.onmessage = (ev) => wrapped.onmessage?.(ev.data);
  ws.onclose = () => wrapped.onclose?.();
  return wrapped;
}

async function run(): Promise<void> {
  const meta: Meta = await (await fetch("/meta")).json();
  const [height, width] = meta.resolution;

  const canvas = el<HTMLCanvasElement>("view");
  canvas.width = width;
  canvas.height = height;
  const ctx = canvas.getContext("2d");
  if (ctx === null) {
    throw new Error("canvas 2d context unavailable");
  }

  const hudStatus = el<HTMLSpanElement>("hud-status");
  const hudFps = el<HTMLSpanElement>("hud-fps");
  const hudLatency = el<HTMLSpanElement>("hud-latency");
  const hudRender = el<HTMLSpanElement>("hud-render");
  const hudCoverage = el<HTMLSpanElement>("hud-coverage");
  el<HTMLSpanElement>("hud-scene").textContent = meta.scene;

  let state: OrbitState = orbitFromHint(meta.orbit);

  const proto = location.protocol === "https:" ? "wss:" : "ws:";
  const client = new ViewerClient({
    socketFactory: () => browserSocket(`${proto}//${location.host}/ws`),
    paint: (frame) => {
      // Copy the payload so the blob sees a plain, fully-owned buffer.
      const blob = new Blob([frame.payload.slice()], { type: "image/png" });
      void createImageBitmap(blob).then((bitmap) => {
        ctx.drawImage(bitmap, 0, 0, canvas.width, canvas.height);
        bitmap.close();
      });
    },
    onHud: (hud) => {
      hudStatus.textContent = hud.connected ? "connected" : "reconnecting...";
      hudStatus.className = hud.connected ? "ok" : "bad";
      hudFps.textContent = hud.fps.toFixed(1);
      hudLatency.textContent = `${hud.latencyMs.toFixed(0)} ms`;
      hudRender.textContent = `${hud.renderMs.toFixed(1)} ms`;
      hudCoverage.textContent = hud.zeroCoverage ? "no coverage" : "";
    },
  });

  const sendCamera = () => {
    state = clampOrbit(state);
    const pose = orbitToPose(state);
    client.request(state.fid++, pose.R, pose.T);
  };

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  canvas.addEventListener("pointerdown", (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    canvas.setPointerCapture(ev.pointerId);
  });
  canvas.addEventListener("pointermove", (ev) => {
    if (!dragging) {
      return;
    }
    state.azimuth += (ev.clientX - lastX) * 0.008;
    state.elevation -= (ev.clientY - lastY) * 0.008;
    lastX = ev.clientX;
    lastY = ev.clientY;
    sendCamera();
  });
  canvas.addEventListener("pointerup", (ev) => {
    dragging = false;
    canvas.releasePointerCapture(ev.pointerId);
  });
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    state.distance *= Math.exp(ev.deltaY * 0.001);
    sendCamera();
  }, { passive: false });

  client.start();
  sendCamera();
}

void run();
