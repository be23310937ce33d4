import { describe, expect, it } from "vitest";

import type { FrameMsg, RolesDoc, StateMsg } from "../src/protocol.js";
import {
  applyServerMessage,
  editRoles,
  effectiveRoles,
  initialState,
  setConnection,
  startTask,
  stopTask,
  taskEnabled,
} from "../src/state.js";

const roles: RolesDoc = {
  reference: ["ref1", "ref2", "ref3"],
  tongue: [{ coil: "tt", vertex: 14 }],
  bite_left: "bl",
  bite_right: "br",
  bite_front: "bf",
  origin: "bf",
};

function stateMsg(phase: StateMsg["phase"]): StateMsg {
  return { type: "state", phase, roles };
}

function frameMsg(t: number): FrameMsg {
  return {
    type: "frame",
    t,
    coils: [{ id: "tt", pos: [0, 0, 0], ok: true }],
    weights: { x: null, y: null },
    vertices: null,
    residual: null,
  };
}

describe("frame coalescing", () => {
  it("keeps only the newest frame but counts all", () => {
    let s = setConnection(initialState(), "open");
    s = applyServerMessage(s, frameMsg(0.01));
    s = applyServerMessage(s, frameMsg(0.02));
    s = applyServerMessage(s, frameMsg(0.03));
    expect(s.latestFrame?.t).toBe(0.03);
    expect(s.framesSeen).toBe(3);
  });
});

describe("task gating follows the server phase", () => {
  const open = (phase: StateMsg["phase"]) =>
    applyServerMessage(setConnection(initialState(), "open"), stateMsg(phase));

  it("nothing is enabled before the first state message", () => {
    const s = setConnection(initialState(), "open");
    expect(taskEnabled(s, "reference")).toBe(false);
    expect(taskEnabled(s, "biteplane")).toBe(false);
    expect(taskEnabled(s, "palate")).toBe(false);
  });

  it("nothing is enabled while disconnected", () => {
    const s = applyServerMessage(initialState(), stateMsg("live"));
    expect(taskEnabled(setConnection(s, "closed"), "palate")).toBe(false);
  });

  it("palate stays unreachable until the bite plane is complete", () => {
    expect(taskEnabled(open("setup"), "palate")).toBe(false);
    expect(taskEnabled(open("biteplane"), "palate")).toBe(false);
    expect(taskEnabled(open("palate"), "palate")).toBe(true);
    expect(taskEnabled(open("live"), "palate")).toBe(true);
  });

  it("bite plane stays unreachable until the reference pose exists", () => {
    expect(taskEnabled(open("setup"), "biteplane")).toBe(false);
    expect(taskEnabled(open("biteplane"), "biteplane")).toBe(true);
    expect(taskEnabled(open("palate"), "biteplane")).toBe(true);
  });

  it("reference capture is available from setup on", () => {
    expect(taskEnabled(open("setup"), "reference")).toBe(true);
    expect(taskEnabled(open("live"), "reference")).toBe(true);
  });

  it("a running task blocks the others", () => {
    let s = open("live");
    s = startTask(s, "biteplane");
    expect(taskEnabled(s, "biteplane")).toBe(true); // to stop it
    expect(taskEnabled(s, "palate")).toBe(false);
    s = stopTask(s);
    expect(taskEnabled(s, "palate")).toBe(true);
  });
});

describe("roles draft", () => {
  it("local edits win until submitted", () => {
    let s = applyServerMessage(setConnection(initialState(), "open"), stateMsg("setup"));
    expect(effectiveRoles(s)?.origin).toBe("bf");
    s = editRoles(s, { ...roles, origin: "recorded" });
    expect(effectiveRoles(s)?.origin).toBe("recorded");
    // a state broadcast does not clobber the draft
    s = applyServerMessage(s, stateMsg("setup"));
    expect(effectiveRoles(s)?.origin).toBe("recorded");
  });
});

describe("error banner", () => {
  it("records the last error", () => {
    const s = applyServerMessage(initialState(), {
      type: "error",
      code: 409,
      message: "record the bite plane before the palate trace",
    });
    expect(s.lastError).toContain("409");
  });
});
