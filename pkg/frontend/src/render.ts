/**
 * Canvas rendering: a midsagittal orthographic view (the clinically
 * meaningful feedback view) and an orbitable perspective view. Plain 2D
 * canvas with painter-sorted flat-shaded triangles; no GPU dependency.
 *
 * Scene axes: +x subject-left, +y anterior, +z superior (mm).
 */

import type { FrameMsg, MeshMsg } from "./protocol.js";

export interface Camera {
  /** orbit angles in radians; yaw about +z, pitch about the view's x axis */
  yaw: number;
  pitch: number;
  distance: number;
  /** orthographic when true (used by the midsagittal view) */
  ortho: boolean;
  scale: number; // px per mm at the target plane
  center: [number, number, number];
}

export function midsagittalCamera(): Camera {
  // looking along -x: the y (anterior) axis runs right, z (superior) up
  return { yaw: Math.PI / 2, pitch: 0, distance: 400, ortho: true, scale: 5, center: [0, -15, 5] };
}

export function orbitCamera(): Camera {
  return { yaw: Math.PI / 4, pitch: 0.35, distance: 260, ortho: false, scale: 4.5, center: [0, -15, 5] };
}

export interface Projected {
  x: number;
  y: number;
  depth: number;
}

/** World point -> screen point for a canvas of size (w, h). */
export function project(cam: Camera, p: ArrayLike<number>, w: number, h: number): Projected {
  const cx = p[0] - cam.center[0];
  const cy = p[1] - cam.center[1];
  const cz = p[2] - cam.center[2];
  // yaw about z
  const sy = Math.sin(cam.yaw);
  const cyw = Math.cos(cam.yaw);
  const x1 = cyw * cx + sy * cy;
  const y1 = -sy * cx + cyw * cy;
  // pitch about the rotated x axis
  const sp = Math.sin(cam.pitch);
  const cp = Math.cos(cam.pitch);
  const y2 = cp * y1 + sp * cz;
  const z2 = -sp * y1 + cp * cz;
  // camera looks along -y2; depth grows away from the viewer
  const depth = cam.distance - y2;
  let px = x1;
  let pz = z2;
  if (!cam.ortho) {
    const f = cam.distance / Math.max(depth, 1e-3);
    px *= f;
    pz *= f;
  }
  return { x: w / 2 + cam.scale * px, y: h / 2 - cam.scale * pz, depth };
}

interface Tri {
  ax: number;
  ay: number;
  bx: number;
  by: number;
  cx: number;
  cy: number;
  depth: number;
  shade: number;
}

function collectTriangles(
  cam: Camera,
  vertices: ArrayLike<number>,
  faces: number[][],
  w: number,
  h: number,
): Tri[] {
  const count = Math.floor(vertices.length / 3);
  const proj: Projected[] = new Array(count);
  for (let i = 0; i < count; i++) {
    proj[i] = project(cam, [vertices[3 * i], vertices[3 * i + 1], vertices[3 * i + 2]], w, h);
  }
  const tris: Tri[] = [];
  for (const [i, j, k] of faces) {
    const a = proj[i];
    const b = proj[j];
    const c = proj[k];
    if (!a || !b || !c) continue;
    // screen-space normal direction doubles as a cheap shading term
    const area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    const span = Math.hypot(b.x - a.x, b.y - a.y) * Math.hypot(c.x - a.x, c.y - a.y) + 1e-9;
    const shade = 0.5 + 0.5 * Math.min(1, Math.abs(area) / span);
    tris.push({
      ax: a.x, ay: a.y, bx: b.x, by: b.y, cx: c.x, cy: c.y,
      depth: (a.depth + b.depth + c.depth) / 3,
      shade,
    });
  }
  tris.sort((p, q) => q.depth - p.depth);
  return tris;
}

function drawMesh(
  ctx: CanvasRenderingContext2D,
  cam: Camera,
  vertices: ArrayLike<number>,
  faces: number[][],
  hue: number,
  alpha: number,
  w: number,
  h: number,
): void {
  for (const t of collectTriangles(cam, vertices, faces, w, h)) {
    const light = Math.round(35 + 40 * t.shade);
    ctx.fillStyle = `hsla(${hue}, 60%, ${light}%, ${alpha})`;
    ctx.beginPath();
    ctx.moveTo(t.ax, t.ay);
    ctx.lineTo(t.bx, t.by);
    ctx.lineTo(t.cx, t.cy);
    ctx.closePath();
    ctx.fill();
  }
}

function drawPlaceholder(ctx: CanvasRenderingContext2D, w: number, h: number): void {
  ctx.strokeStyle = "#2a3343";
  ctx.lineWidth = 1;
  for (let gx = 0; gx <= w; gx += 40) {
    ctx.beginPath();
    ctx.moveTo(gx, 0);
    ctx.lineTo(gx, h);
    ctx.stroke();
  }
  for (let gy = 0; gy <= h; gy += 40) {
    ctx.beginPath();
    ctx.moveTo(0, gy);
    ctx.lineTo(w, gy);
    ctx.stroke();
  }
  ctx.fillStyle = "#8fa3bf";
  ctx.font = "14px system-ui, sans-serif";
  ctx.textAlign = "center";
  ctx.fillText("waiting for data", w / 2, h / 2);
  ctx.textAlign = "left";
}

export interface SceneInputs {
  frame: FrameMsg | null;
  tongueFaces: number[][] | null;
  palate: MeshMsg | null;
  overlay: string[];
}

export function renderScene(
  canvas: HTMLCanvasElement,
  cam: Camera,
  scene: SceneInputs,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const w = canvas.width;
  const h = canvas.height;
  ctx.fillStyle = "#141a24";
  ctx.fillRect(0, 0, w, h);

  const frame = scene.frame;
  const haveTongue = frame?.vertices != null && scene.tongueFaces != null;
  if (!haveTongue && scene.palate === null) {
    drawPlaceholder(ctx, w, h);
  } else {
    if (scene.palate !== null) {
      drawMesh(ctx, cam, scene.palate.vertices, scene.palate.faces, 210, 0.55, w, h);
    }
    if (haveTongue && frame) {
      drawMesh(ctx, cam, frame.vertices as number[], scene.tongueFaces as number[][], 350, 0.9, w, h);
    }
  }

  if (frame) {
    for (const coil of frame.coils) {
      const p = project(cam, coil.pos, w, h);
      ctx.beginPath();
      ctx.arc(p.x, p.y, 5, 0, 2 * Math.PI);
      ctx.fillStyle = coil.ok ? "#ffd166" : "#6c757d";
      ctx.fill();
      ctx.fillStyle = "#cfd8e3";
      ctx.font = "10px system-ui, sans-serif";
      ctx.fillText(coil.id, p.x + 7, p.y + 3);
    }
  }

  ctx.fillStyle = "#e7edf5";
  ctx.font = "12px system-ui, sans-serif";
  scene.overlay.forEach((line, i) => ctx.fillText(line, 10, 18 + 16 * i));
}
