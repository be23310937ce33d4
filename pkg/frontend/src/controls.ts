/**
 * Control panel wiring: role form, task buttons, playback, settings.
 * Buttons follow the server-reported phase via taskEnabled; every click
 * turns into exactly one documented client message.
 */

import type { RolesDoc, TaskName } from "./protocol.js";
import { playMessage, setMessage, setRolesMessage, taskMessage } from "./protocol.js";
import type { ViewState } from "./state.js";
import { effectiveRoles, taskEnabled } from "./state.js";
import type { ClientMessage } from "./protocol.js";

export interface ControlDeps {
  send(msg: ClientMessage): string | null;
  getState(): ViewState;
  onLocalEdit(draft: RolesDoc): void;
  onDraftSubmitted(): void;
  onTaskToggled(task: TaskName, running: boolean): void;
}

const TASKS: TaskName[] = ["reference", "biteplane", "palate"];

export function rolesFromForm(root: ParentNode): RolesDoc {
  const val = (id: string) => (root.querySelector(`#${id}`) as HTMLInputElement).value.trim();
  const tongue = val("roles-tongue")
    .split(",")
    .map((s) => s.trim())
    .filter((s) => s.length > 0)
    .map((pair) => {
      const [coil, vertex] = pair.split(":").map((p) => p.trim());
      return { coil, vertex: Number(vertex) };
    });
  return {
    reference: val("roles-reference").split(",").map((s) => s.trim()).filter((s) => s),
    tongue,
    bite_left: val("roles-bite-left"),
    bite_right: val("roles-bite-right"),
    bite_front: val("roles-bite-front"),
    origin: val("roles-origin"),
    trace_coil: val("roles-trace") || null,
  };
}

export function fillRolesForm(root: ParentNode, roles: RolesDoc): void {
  const set = (id: string, v: string) => {
    const el = root.querySelector(`#${id}`) as HTMLInputElement | null;
    if (el) el.value = v;
  };
  set("roles-reference", roles.reference.join(","));
  set("roles-tongue", roles.tongue.map((c) => `${c.coil}:${c.vertex}`).join(","));
  set("roles-bite-left", roles.bite_left);
  set("roles-bite-right", roles.bite_right);
  set("roles-bite-front", roles.bite_front);
  set("roles-origin", roles.origin);
  set("roles-trace", roles.trace_coil ?? "");
}

export function bindControls(root: ParentNode, deps: ControlDeps): () => void {
  const feedback = root.querySelector("#control-feedback") as HTMLElement;

  const report = (problem: string | null) => {
    feedback.textContent = problem ?? "";
  };

  for (const task of TASKS) {
    const btn = root.querySelector(`#task-${task}`) as HTMLButtonElement;
    btn.addEventListener("click", () => {
      const running = deps.getState().runningTask === task;
      const msg = taskMessage(task, running ? "stop" : "start");
      const problem = deps.send(msg);
      report(problem);
      if (problem === null) deps.onTaskToggled(task, !running);
    });
  }

  (root.querySelector("#roles-submit") as HTMLButtonElement).addEventListener("click", () => {
    const roles = rolesFromForm(root);
    const problem = deps.send(setRolesMessage(roles));
    report(problem);
    if (problem === null) deps.onDraftSubmitted();
  });

  for (const id of [
    "roles-reference", "roles-tongue", "roles-bite-left", "roles-bite-right",
    "roles-bite-front", "roles-origin", "roles-trace",
  ]) {
    (root.querySelector(`#${id}`) as HTMLInputElement).addEventListener("input", () => {
      deps.onLocalEdit(rolesFromForm(root));
    });
  }

  (root.querySelector("#play-btn") as HTMLButtonElement).addEventListener("click", () => {
    const source = (root.querySelector("#play-source") as HTMLSelectElement).value as
      | "device"
      | "file";
    const path = (root.querySelector("#play-path") as HTMLInputElement).value.trim();
    report(deps.send(playMessage(source, path)));
  });

  (root.querySelector("#stop-btn") as HTMLButtonElement).addEventListener("click", () => {
    report(deps.send({ type: "stop" }));
  });

  (root.querySelector("#smoothing-input") as HTMLInputElement).addEventListener("change", (ev) => {
    const value = Number((ev.target as HTMLInputElement).value);
    report(deps.send(setMessage("smoothing_window", value)));
  });

  (root.querySelector("#delay-input") as HTMLInputElement).addEventListener("change", (ev) => {
    const value = Number((ev.target as HTMLInputElement).value);
    report(deps.send(setMessage("delay", value)));
  });

  // reflects phase/connection changes into the widgets
  return () => {
    const s = deps.getState();
    for (const task of TASKS) {
      const btn = root.querySelector(`#task-${task}`) as HTMLButtonElement;
      btn.disabled = !taskEnabled(s, task);
      btn.textContent =
        s.runningTask === task ? `stop ${task}` : `start ${task}`;
    }
    const roles = effectiveRoles(s);
    if (roles !== null && s.rolesDraft === null) {
      fillRolesForm(root, roles);
    }
    const phaseEl = root.querySelector("#phase-label") as HTMLElement;
    phaseEl.textContent = s.phase ?? "—";
    const conn = root.querySelector("#connection-banner") as HTMLElement;
    conn.dataset.state = s.connection;
    conn.textContent =
      s.connection === "open" ? "connected" : s.connection === "closed" ? "disconnected — retrying" : "connecting…";
    if (s.lastError) {
      (root.querySelector("#control-feedback") as HTMLElement).textContent = s.lastError;
    }
  };
}
