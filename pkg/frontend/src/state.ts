/**
 * View state and its reducer. Network events funnel through
 * applyServerMessage; rendering reads a snapshot. Frames coalesce: only
 * the newest one is kept, so a slow display never builds a backlog.
 */

import type {
  FrameMsg,
  MeshMsg,
  Phase,
  RolesDoc,
  ServerMessage,
  TaskName,
} from "./protocol.js";

export type Connection = "connecting" | "open" | "closed";

export interface ViewState {
  connection: Connection;
  serverVersion: number | null;
  phase: Phase | null;
  roles: RolesDoc | null;
  /** local edits to the role form; null means "mirror the server" */
  rolesDraft: RolesDoc | null;
  tongueMesh: MeshMsg | null;
  palateMesh: MeshMsg | null;
  latestFrame: FrameMsg | null;
  framesSeen: number;
  lastError: string | null;
  runningTask: TaskName | null;
}

export function initialState(): ViewState {
  return {
    connection: "connecting",
    serverVersion: null,
    phase: null,
    roles: null,
    rolesDraft: null,
    tongueMesh: null,
    palateMesh: null,
    latestFrame: null,
    framesSeen: 0,
    lastError: null,
    runningTask: null,
  };
}

export function applyServerMessage(s: ViewState, m: ServerMessage): ViewState {
  switch (m.type) {
    case "hello":
      return { ...s, serverVersion: m.version };
    case "mesh":
      return m.name === "tongue" ? { ...s, tongueMesh: m } : { ...s, palateMesh: m };
    case "frame":
      // newest wins; render loops draw at most one frame per tick
      return { ...s, latestFrame: m, framesSeen: s.framesSeen + 1 };
    case "state":
      return { ...s, phase: m.phase, roles: m.roles };
    case "error":
      return { ...s, lastError: `${m.code}: ${m.message}` };
    default:
      return s;
  }
}

export function setConnection(s: ViewState, c: Connection): ViewState {
  return c === "open" ? { ...s, connection: c, lastError: null } : { ...s, connection: c };
}

/**
 * Task availability follows the server-reported session phase: the bite
 * plane needs a captured reference pose, the palate trace needs the bite
 * plane to be complete.
 */
export function taskEnabled(s: ViewState, task: TaskName): boolean {
  if (s.connection !== "open" || s.phase === null) return false;
  if (s.runningTask !== null && s.runningTask !== task) return false;
  switch (task) {
    case "reference":
      return true;
    case "biteplane":
      return s.phase === "biteplane" || s.phase === "palate" || s.phase === "live";
    case "palate":
      return s.phase === "palate" || s.phase === "live";
  }
}

export function startTask(s: ViewState, task: TaskName): ViewState {
  return { ...s, runningTask: task };
}

export function stopTask(s: ViewState): ViewState {
  return { ...s, runningTask: null };
}

export function editRoles(s: ViewState, draft: RolesDoc): ViewState {
  return { ...s, rolesDraft: draft };
}

export function clearRolesDraft(s: ViewState): ViewState {
  return { ...s, rolesDraft: null };
}

/** What the role form should display: local edits win until submitted. */
export function effectiveRoles(s: ViewState): RolesDoc | null {
  return s.rolesDraft ?? s.roles;
}
