import { readFileSync } from "node:fs";
import { join } from "node:path";

import { describe, expect, it } from "vitest";

import {
  maxAbsDiff,
  parseModel,
  reconstructMultilinear,
  reconstructPca,
  type MultilinearModel,
} from "../src/model.js";
import { parseServerMessage, type FrameMsg } from "../src/protocol.js";

const FIXTURES = join(__dirname, "fixtures");

function loadFixtureModel(): MultilinearModel {
  const doc = JSON.parse(readFileSync(join(FIXTURES, "model.json"), "utf-8"));
  const model = parseModel(doc);
  if (model.kind !== "multilinear") throw new Error("fixture model must be multilinear");
  return model;
}

function loadFixtureFrames(): FrameMsg[] {
  const lines = readFileSync(join(FIXTURES, "messages.jsonl"), "utf-8")
    .split("\n")
    .filter((l) => l.trim().length > 0);
  const frames: FrameMsg[] = [];
  for (const line of lines) {
    const msg = parseServerMessage(line);
    if (msg?.type === "frame" && msg.weights.x !== null && msg.vertices !== null) {
      frames.push(msg);
    }
  }
  return frames;
}

describe("bilinear reconstruction math", () => {
  it("zero weights give the mean", () => {
    const model = loadFixtureModel();
    const out = reconstructMultilinear(model, new Array(model.n).fill(0), new Array(model.m).fill(0));
    expect(maxAbsDiff(out, model.mean)).toBe(0);
  });

  it("a single mode adds exactly x*y times its core block", () => {
    const model = loadFixtureModel();
    const x = new Array(model.n).fill(0);
    const y = new Array(model.m).fill(0);
    x[0] = 2;
    y[1] = -1.5;
    const out = reconstructMultilinear(model, x, y);
    const dim = model.mean.length;
    const off = (0 * model.m + 1) * dim;
    for (const d of [0, 1, dim - 1]) {
      expect(out[d]).toBeCloseTo(model.mean[d] + 2 * -1.5 * model.core[off + d], 12);
    }
  });

  it("pca reconstruction is mean + basis combination", () => {
    const model = {
      kind: "pca" as const,
      vertices: 1,
      n: 2,
      mean: Float64Array.from([1, 2, 3]),
      basis: Float64Array.from([1, 0, 0, 0, 1, 0]),
      faces: [],
    };
    const out = reconstructPca(model, [0.5, -2]);
    expect(Array.from(out)).toEqual([1.5, 0, 3]);
  });
});

describe("live-session debug cross-check", () => {
  it("client reconstruction matches broadcast vertices within 1e-4 mm", () => {
    const model = loadFixtureModel();
    const frames = loadFixtureFrames();
    expect(frames.length).toBeGreaterThanOrEqual(20);
    let worst = 0;
    for (const frame of frames) {
      const local = reconstructMultilinear(
        model,
        frame.weights.x as number[],
        frame.weights.y as number[],
      );
      worst = Math.max(worst, maxAbsDiff(local, frame.vertices as number[]));
    }
    expect(worst).toBeLessThan(1e-4);
  });

  it("fixture session walks through the documented phases", () => {
    const lines = readFileSync(join(FIXTURES, "messages.jsonl"), "utf-8")
      .split("\n")
      .filter((l) => l.trim().length > 0);
    const phases: string[] = [];
    for (const line of lines) {
      const msg = parseServerMessage(line);
      if (msg?.type === "state" && phases[phases.length - 1] !== msg.phase) {
        phases.push(msg.phase);
      }
    }
    expect(phases[0]).toBe("setup");
    expect(phases).toContain("palate");
  });
});
