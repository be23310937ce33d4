/**
 * Shape model files (same JSON schema the engine writes) and client-side
 * reconstruction. Used by the debug cross-check that compares a local
 * reconstruction from broadcast weights against the broadcast vertices.
 */

export interface PcaModel {
  kind: "pca";
  vertices: number;
  n: number;
  mean: Float64Array;
  basis: Float64Array; // n rows of 3V, row-major
  faces: number[][];
}

export interface MultilinearModel {
  kind: "multilinear";
  vertices: number;
  n: number;
  m: number;
  mean: Float64Array;
  core: Float64Array; // (n * m) rows of 3V, row-major [i][j]
  faces: number[][];
}

export type ShapeModel = PcaModel | MultilinearModel;

export function parseModel(doc: unknown): ShapeModel {
  const d = doc as Record<string, unknown>;
  if (!d || d.format !== "articfeed-model" || d.version !== 1) {
    throw new Error("not an articfeed-model v1 file");
  }
  const vertices = d.vertices as number;
  const mean = Float64Array.from(d.mean as number[]);
  if (mean.length !== 3 * vertices) throw new Error("mean length mismatch");
  const faces = d.faces as number[][];
  if (d.kind === "pca") {
    const rows = d.basis as number[][];
    const n = d.n as number;
    if (rows.length !== n) throw new Error("basis row count mismatch");
    const basis = new Float64Array(n * 3 * vertices);
    rows.forEach((row, i) => {
      if (row.length !== 3 * vertices) throw new Error("basis row length mismatch");
      basis.set(row, i * 3 * vertices);
    });
    return { kind: "pca", vertices, n, mean, basis, faces };
  }
  if (d.kind === "multilinear") {
    const n = d.n as number;
    const m = d.m as number;
    const core3 = d.core as number[][][];
    if (core3.length !== n) throw new Error("core anatomy dimension mismatch");
    const core = new Float64Array(n * m * 3 * vertices);
    for (let i = 0; i < n; i++) {
      if (core3[i].length !== m) throw new Error("core pose dimension mismatch");
      for (let j = 0; j < m; j++) {
        const block = core3[i][j];
        if (block.length !== 3 * vertices) throw new Error("core block length mismatch");
        core.set(block, (i * m + j) * 3 * vertices);
      }
    }
    return { kind: "multilinear", vertices, n, m, mean, core, faces };
  }
  throw new Error(`unknown model kind ${String(d.kind)}`);
}

export function reconstructPca(model: PcaModel, x: number[]): Float64Array {
  if (x.length !== model.n) throw new Error("weight length mismatch");
  const dim = model.mean.length;
  const out = Float64Array.from(model.mean);
  for (let i = 0; i < model.n; i++) {
    const w = x[i];
    if (w === 0) continue;
    const off = i * dim;
    for (let d = 0; d < dim; d++) out[d] += w * model.basis[off + d];
  }
  return out;
}

export function reconstructMultilinear(
  model: MultilinearModel,
  x: number[],
  y: number[],
): Float64Array {
  if (x.length !== model.n || y.length !== model.m) throw new Error("weight length mismatch");
  const dim = model.mean.length;
  const out = Float64Array.from(model.mean);
  for (let i = 0; i < model.n; i++) {
    for (let j = 0; j < model.m; j++) {
      const w = x[i] * y[j];
      if (w === 0) continue;
      const off = (i * model.m + j) * dim;
      for (let d = 0; d < dim; d++) out[d] += w * model.core[off + d];
    }
  }
  return out;
}

export function maxAbsDiff(a: ArrayLike<number>, b: ArrayLike<number>): number {
  if (a.length !== b.length) return Infinity;
  let worst = 0;
  for (let i = 0; i < a.length; i++) {
    const d = Math.abs(a[i] - b[i]);
    if (d > worst) worst = d;
  }
  return worst;
}

export async function fetchModel(url: string): Promise<ShapeModel> {
  const resp = await fetch(url);
  if (!resp.ok) throw new Error(`model fetch failed: ${resp.status}`);
  return parseModel(await resp.json());
}
