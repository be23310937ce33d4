/**
 * Entry point: connects to the engine, pumps messages into the view
 * state, renders the two views each animation frame, and wires the
 * control panel. Server address via ?ws=, optional model file via
 * ?model= for the debug reconstruction cross-check.
 */

import { FeedClient } from "./net.js";
import type { ServerMessage } from "./protocol.js";
import {
  applyServerMessage,
  clearRolesDraft,
  editRoles,
  initialState,
  setConnection,
  startTask,
  stopTask,
  type ViewState,
} from "./state.js";
import { bindControls } from "./controls.js";
import { midsagittalCamera, orbitCamera, renderScene } from "./render.js";
import { fetchModel, maxAbsDiff, reconstructMultilinear, type ShapeModel } from "./model.js";

const params = new URLSearchParams(location.search);
const wsUrl = params.get("ws") ?? "ws://127.0.0.1:8765";
const modelUrl = params.get("model");

let state: ViewState = initialState();
let debugModel: ShapeModel | null = null;
let debugDiff: number | null = null;

const client = new FeedClient(wsUrl, {
  onMessage(msg: ServerMessage) {
    state = applyServerMessage(state, msg);
    if (msg.type === "frame" && debugModel?.kind === "multilinear") {
      const { x, y } = msg.weights;
      if (x !== null && y !== null && msg.vertices !== null) {
        debugDiff = maxAbsDiff(reconstructMultilinear(debugModel, x, y), msg.vertices);
      }
    }
  },
  onOpen() {
    state = setConnection(state, "open");
  },
  onClose() {
    state = setConnection(state, "closed");
  },
});

if (modelUrl !== null) {
  fetchModel(modelUrl)
    .then((m) => {
      debugModel = m;
    })
    .catch((err) => console.warn("debug model unavailable:", err));
}

const refreshControls = bindControls(document, {
  send: (msg) => client.send(msg),
  getState: () => state,
  onLocalEdit(draft) {
    state = editRoles(state, draft);
  },
  onDraftSubmitted() {
    state = clearRolesDraft(state);
  },
  onTaskToggled(task, running) {
    state = running ? startTask(state, task) : stopTask(state);
  },
});

const sagCanvas = document.querySelector("#view-midsagittal") as HTMLCanvasElement;
const orbCanvas = document.querySelector("#view-orbit") as HTMLCanvasElement;
const sagCam = midsagittalCamera();
const orbCam = orbitCamera();

let dragging = false;
let lastX = 0;
let lastY = 0;
orbCanvas.addEventListener("mousedown", (ev) => {
  dragging = true;
  lastX = ev.clientX;
  lastY = ev.clientY;
});
window.addEventListener("mouseup", () => {
  dragging = false;
});
window.addEventListener("mousemove", (ev) => {
  if (!dragging) return;
  orbCam.yaw += (ev.clientX - lastX) * 0.01;
  orbCam.pitch = Math.max(-1.4, Math.min(1.4, orbCam.pitch + (ev.clientY - lastY) * 0.01));
  lastX = ev.clientX;
  lastY = ev.clientY;
});
orbCanvas.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  orbCam.scale = Math.max(1, Math.min(20, orbCam.scale * (ev.deltaY < 0 ? 1.1 : 0.9)));
});

function overlay(): string[] {
  const lines: string[] = [];
  const f = state.latestFrame;
  if (f?.residual != null) lines.push(`residual ${f.residual.toFixed(3)} mm`);
  if (state.phase !== null) lines.push(`phase ${state.phase}`);
  if (debugDiff !== null) lines.push(`debug Δ ${debugDiff.toExponential(2)} mm`);
  return lines;
}

function tick(): void {
  const scene = {
    frame: state.latestFrame,
    tongueFaces: state.tongueMesh?.faces ?? null,
    palate: state.palateMesh,
    overlay: overlay(),
  };
  renderScene(sagCanvas, sagCam, scene);
  renderScene(orbCanvas, orbCam, { ...scene, overlay: [] });
  refreshControls();
  requestAnimationFrame(tick);
}
requestAnimationFrame(tick);
