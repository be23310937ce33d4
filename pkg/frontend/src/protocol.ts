/**
 * Message schema shared with the processing service.
 *
 * Server -> client: hello, mesh, frame, state, error.
 * Client -> server: set_roles, task, play, stop, set.
 * Everything outbound goes through validateClientMessage before send.
 */

export type Phase = "setup" | "biteplane" | "palate" | "live";

export interface RolesDoc {
  reference: string[];
  tongue: { coil: string; vertex: number }[];
  bite_left: string;
  bite_right: string;
  bite_front: string;
  origin: string;
  jaw?: string | null;
  upper_lip?: string | null;
  lower_lip?: string | null;
  trace_coil?: string | null;
}

export interface HelloMsg {
  type: "hello";
  version: number;
}

export interface MeshMsg {
  type: "mesh";
  name: "tongue" | "palate";
  vertices: number[];
  faces: number[][];
}

export interface CoilView {
  id: string;
  pos: number[];
  ok: boolean;
}

export interface FrameMsg {
  type: "frame";
  t: number;
  coils: CoilView[];
  weights: { x: number[] | null; y: number[] | null };
  vertices: number[] | null;
  residual: number | null;
}

export interface StateMsg {
  type: "state";
  phase: Phase;
  roles: RolesDoc;
}

export interface ErrorMsg {
  type: "error";
  code: number;
  message: string;
}

export type ServerMessage = HelloMsg | MeshMsg | FrameMsg | StateMsg | ErrorMsg;

const PHASES: Phase[] = ["setup", "biteplane", "palate", "live"];

function isNumberArray(v: unknown): v is number[] {
  return Array.isArray(v) && v.every((x) => typeof x === "number" && Number.isFinite(x));
}

/** Parse + validate one incoming text message; null when off-schema. */
export function parseServerMessage(raw: string): ServerMessage | null {
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof doc !== "object" || doc === null) return null;
  const m = doc as Record<string, unknown>;
  switch (m.type) {
    case "hello":
      return typeof m.version === "number" ? (m as unknown as HelloMsg) : null;
    case "mesh": {
      if (m.name !== "tongue" && m.name !== "palate") return null;
      if (!isNumberArray(m.vertices)) return null;
      if (!Array.isArray(m.faces) || !m.faces.every(isNumberArray)) return null;
      return m as unknown as MeshMsg;
    }
    case "frame": {
      if (typeof m.t !== "number") return null;
      if (!Array.isArray(m.coils)) return null;
      for (const c of m.coils) {
        const cc = c as Record<string, unknown>;
        if (typeof cc.id !== "string" || !isNumberArray(cc.pos) || typeof cc.ok !== "boolean") {
          return null;
        }
      }
      const w = m.weights as Record<string, unknown> | undefined;
      if (!w || typeof w !== "object") return null;
      if (w.x !== null && !isNumberArray(w.x)) return null;
      if (w.y !== null && !isNumberArray(w.y)) return null;
      if (m.vertices !== null && !isNumberArray(m.vertices)) return null;
      if (m.residual !== null && typeof m.residual !== "number") return null;
      return m as unknown as FrameMsg;
    }
    case "state": {
      if (!PHASES.includes(m.phase as Phase)) return null;
      if (typeof m.roles !== "object" || m.roles === null) return null;
      return m as unknown as StateMsg;
    }
    case "error":
      return typeof m.code === "number" && typeof m.message === "string"
        ? (m as unknown as ErrorMsg)
        : null;
    default:
      return null;
  }
}

// -- outbound ---------------------------------------------------------------

export type TaskName = "reference" | "biteplane" | "palate";
export type TaskAction = "start" | "stop";

export interface SetRolesMsg {
  type: "set_roles";
  roles: RolesDoc;
}

export interface TaskMsg {
  type: "task";
  name: TaskName;
  action: TaskAction;
}

export interface PlayMsg {
  type: "play";
  source: "device" | "file";
  path: string;
}

export interface StopMsg {
  type: "stop";
}

export interface SetMsg {
  type: "set";
  key: "smoothing_window" | "delay";
  value: number;
}

export type ClientMessage = SetRolesMsg | TaskMsg | PlayMsg | StopMsg | SetMsg;

export function taskMessage(name: TaskName, action: TaskAction): TaskMsg {
  return { type: "task", name, action };
}

export function setRolesMessage(roles: RolesDoc): SetRolesMsg {
  return { type: "set_roles", roles };
}

export function playMessage(source: "device" | "file", path: string): PlayMsg {
  return { type: "play", source, path };
}

export function setMessage(key: "smoothing_window" | "delay", value: number): SetMsg {
  return { type: "set", key, value };
}

function validateRoles(roles: RolesDoc): string | null {
  if (!Array.isArray(roles.reference) || roles.reference.length < 3) {
    return "need at least 3 reference coils";
  }
  if (roles.reference.some((r) => typeof r !== "string" || !r)) {
    return "reference coil ids must be non-empty strings";
  }
  if (new Set(roles.reference).size !== roles.reference.length) {
    return "reference coil ids must be unique";
  }
  if (!Array.isArray(roles.tongue)) return "tongue correspondences must be a list";
  for (const c of roles.tongue) {
    if (typeof c.coil !== "string" || !c.coil) return "tongue correspondence needs a coil id";
    if (!Number.isInteger(c.vertex) || c.vertex < 0) return "vertex index must be a non-negative integer";
  }
  const tongueIds = roles.tongue.map((c) => c.coil);
  if (new Set(tongueIds).size !== tongueIds.length) return "tongue coil ids must be unique";
  if (tongueIds.some((id) => roles.reference.includes(id))) {
    return "a coil may not be both reference and tongue";
  }
  for (const key of ["bite_left", "bite_right", "bite_front", "origin"] as const) {
    if (typeof roles[key] !== "string" || !roles[key]) return `${key} is required`;
  }
  return null;
}

/** Returns null when the message conforms to the schema, else the problem. */
export function validateClientMessage(msg: ClientMessage): string | null {
  switch (msg.type) {
    case "set_roles":
      return validateRoles(msg.roles);
    case "task":
      if (!["reference", "biteplane", "palate"].includes(msg.name)) return "unknown task name";
      if (msg.action !== "start" && msg.action !== "stop") return "unknown task action";
      return null;
    case "play":
      if (msg.source !== "device" && msg.source !== "file") return "source must be device or file";
      if (typeof msg.path !== "string" || !msg.path) return "path is required";
      return null;
    case "stop":
      return null;
    case "set":
      if (msg.key === "smoothing_window") {
        if (!Number.isInteger(msg.value) || msg.value < 1 || msg.value % 2 === 0) {
          return "smoothing_window must be an odd integer >= 1";
        }
        return null;
      }
      if (msg.key === "delay") {
        return typeof msg.value === "number" && msg.value >= 0 ? null : "delay must be >= 0";
      }
      return "unknown setting key";
    default:
      return "unknown message type";
  }
}
