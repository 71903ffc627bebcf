/**
 * Gradient backends: the deterministic mock, and a small bundled denoiser
 * model exercising the full pipeline a real diffusion wrapper would run —
 * grayscale->RGB replication, bilinear resize to the model's native
 * resolution, noising with the model's own schedule, prompt-conditioned
 * noise prediction with optional classifier-free guidance, and resampling
 * of the weighted residual back to the request resolution.
 */

import { readFileSync } from "node:fs";
import { GuidanceRequest } from "./protocol.js";
import { Rng, fnv1a64 } from "./rng.js";

export interface BackendResult {
  grads: Float64Array;
  tauUsed: number;
}

export interface Backend {
  readonly name: string;
  handle(req: GuidanceRequest): BackendResult;
}

export type WTau = "one" | "sigma2";

// -- mock ---------------------------------------------------------------------

export class MockBackend implements Backend {
  readonly name = "mock";

  constructor(private readonly constant = 0) {}

  handle(req: GuidanceRequest): BackendResult {
    const [k, h, w] = req.shape;
    const grads = new Float64Array(k * h * w).fill(this.constant);
    return { grads, tauUsed: req.tau ?? 500 };
  }
}

// -- model schedule -----------------------------------------------------------

export class Schedule {
  constructor(readonly T: number,
              readonly alphaBarStart: number,
              readonly alphaBarEnd: number) {
    if (T < 2) throw new Error(`schedule needs T >= 2, got ${T}`);
  }

  alphaBar(tau: number): number {
    if (tau < 1 || tau > this.T) {
      throw new Error(`tau ${tau} outside [1, ${this.T}]`);
    }
    const t = (tau - 1) / (this.T - 1);
    return this.alphaBarStart + t * (this.alphaBarEnd - this.alphaBarStart);
  }

  alpha(tau: number): number {
    return Math.sqrt(this.alphaBar(tau));
  }

  sigma(tau: number): number {
    return Math.sqrt(1 - this.alphaBar(tau));
  }

  get tauRange(): [number, number] {
    return [Math.max(1, Math.round(0.05 * this.T)),
            Math.min(this.T, Math.round(0.95 * this.T))];
  }
}

// -- bundled model ------------------------------------------------------------

export interface ModelWeights {
  id: string;
  channels: number;
  resolution: number;
  schedule: { T: number; alpha_bar_start: number; alpha_bar_end: number };
  // per-pixel MLP: features -> hidden (tanh) -> channels
  w1: number[][]; // hidden x features
  b1: number[];
  w2: number[][]; // channels x hidden
  b2: number[];
}

function checkMatrix(m: unknown, rows: number, cols: number,
                     what: string): number[][] {
  if (!Array.isArray(m) || m.length !== rows
      || !m.every((r) => Array.isArray(r) && r.length === cols
                  && r.every((v) => typeof v === "number"
                             && Number.isFinite(v)))) {
    throw new Error(`model weights: ${what} must be ${rows}x${cols} finite`);
  }
  return m as number[][];
}

export function loadModel(path: string): ModelWeights {
  let raw: string;
  try {
    raw = readFileSync(path, "utf-8");
  } catch (e) {
    throw new Error(`cannot read model file ${path}: ${(e as Error).message}`);
  }
  let obj: Record<string, unknown>;
  try {
    obj = JSON.parse(raw);
  } catch (e) {
    throw new Error(`model file ${path} is not valid JSON: `
      + (e as Error).message);
  }
  const channels = obj.channels;
  const resolution = obj.resolution;
  if (!Number.isInteger(channels) || (channels as number) < 1
      || !Number.isInteger(resolution) || (resolution as number) < 4) {
    throw new Error("model weights: bad channels/resolution");
  }
  const sched = obj.schedule as Record<string, unknown> | undefined;
  if (!sched || !Number.isInteger(sched.T)
      || typeof sched.alpha_bar_start !== "number"
      || typeof sched.alpha_bar_end !== "number") {
    throw new Error("model weights: bad schedule");
  }
  const hidden = Array.isArray(obj.b1) ? (obj.b1 as unknown[]).length : 0;
  const c = channels as number;
  const features = 2 * c + 5; // z, blur(z), tau, 4 prompt dims
  return {
    id: String(obj.id ?? "unknown"),
    channels: c,
    resolution: resolution as number,
    schedule: {
      T: sched.T as number,
      alpha_bar_start: sched.alpha_bar_start as number,
      alpha_bar_end: sched.alpha_bar_end as number,
    },
    w1: checkMatrix(obj.w1, hidden, features, "w1"),
    b1: checkMatrix([obj.b1], 1, hidden, "b1")[0]!,
    w2: checkMatrix(obj.w2, c, hidden, "w2"),
    b2: checkMatrix([obj.b2], 1, c, "b2")[0]!,
  };
}

// -- image plumbing -----------------------------------------------------------

/** Bilinear resample of a single-channel image (row-major h x w). */
export function resize(src: Float64Array, h: number, w: number,
                       oh: number, ow: number): Float64Array {
  const out = new Float64Array(oh * ow);
  const sy = h / oh;
  const sx = w / ow;
  for (let y = 0; y < oh; y++) {
    const fy = Math.min(h - 1, Math.max(0, (y + 0.5) * sy - 0.5));
    const y0 = Math.floor(fy);
    const y1 = Math.min(h - 1, y0 + 1);
    const wy = fy - y0;
    for (let x = 0; x < ow; x++) {
      const fx = Math.min(w - 1, Math.max(0, (x + 0.5) * sx - 0.5));
      const x0 = Math.floor(fx);
      const x1 = Math.min(w - 1, x0 + 1);
      const wx = fx - x0;
      out[y * ow + x] =
        (1 - wy) * ((1 - wx) * src[y0 * w + x0]! + wx * src[y0 * w + x1]!)
        + wy * ((1 - wx) * src[y1 * w + x0]! + wx * src[y1 * w + x1]!);
    }
  }
  return out;
}

/** 3x3 box blur with edge clamping, single channel. */
function boxBlur(src: Float64Array, h: number, w: number): Float64Array {
  const out = new Float64Array(h * w);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      let acc = 0;
      for (let dy = -1; dy <= 1; dy++) {
        for (let dx = -1; dx <= 1; dx++) {
          const yy = Math.min(h - 1, Math.max(0, y + dy));
          const xx = Math.min(w - 1, Math.max(0, x + dx));
          acc += src[yy * w + xx]!;
        }
      }
      out[y * w + x] = acc / 9;
    }
  }
  return out;
}

function promptEmbedding(prompt: string): Float64Array {
  const rng = new Rng(fnv1a64(prompt));
  const emb = new Float64Array(4);
  for (let i = 0; i < 4; i++) emb[i] = 0.5 * rng.normal();
  return emb;
}

// -- model backend ------------------------------------------------------------

export class ModelBackend implements Backend {
  readonly name: string;
  readonly sched: Schedule;

  constructor(private readonly model: ModelWeights,
              private readonly wTau: WTau = "one",
              private readonly cfgScale = 1.0) {
    this.name = model.id;
    this.sched = new Schedule(model.schedule.T,
                              model.schedule.alpha_bar_start,
                              model.schedule.alpha_bar_end);
  }

  /** eps-hat for one noised frame (channels x res x res, flattened per
   * channel) under one prompt embedding. */
  private predictNoise(z: Float64Array[], tau: number,
                       emb: Float64Array): Float64Array[] {
    const m = this.model;
    const res = m.resolution;
    const n = res * res;
    const blur = z.map((ch) => boxBlur(ch, res, res));
    const out = z.map(() => new Float64Array(n));
    const hidden = m.b1.length;
    const tauNorm = tau / this.sched.T;
    const feat = new Float64Array(2 * m.channels + 5);
    for (let p = 0; p < n; p++) {
      let f = 0;
      for (let c = 0; c < m.channels; c++) feat[f++] = z[c]![p]!;
      for (let c = 0; c < m.channels; c++) feat[f++] = blur[c]![p]!;
      feat[f++] = tauNorm;
      for (let i = 0; i < 4; i++) feat[f++] = emb[i]!;
      for (let c = 0; c < m.channels; c++) {
        let acc = m.b2[c]!;
        for (let hIdx = 0; hIdx < hidden; hIdx++) {
          let pre = m.b1[hIdx]!;
          const row = m.w1[hIdx]!;
          for (let i = 0; i < feat.length; i++) pre += row[i]! * feat[i]!;
          acc += m.w2[c]![hIdx]! * Math.tanh(pre);
        }
        out[c]![p] = acc;
      }
    }
    return out;
  }

  handle(req: GuidanceRequest): BackendResult {
    const m = this.model;
    const [k, h, w] = req.shape;
    const res = m.resolution;
    const n = res * res;
    const rng = new Rng(BigInt(req.seed));
    const [lo, hi] = this.sched.tauRange;
    const tau = req.tau ?? rng.int(lo, hi);
    const alpha = this.sched.alpha(tau);
    const sigma = this.sched.sigma(tau);
    const weight = this.wTau === "sigma2" ? sigma * sigma : 1.0;
    const emb = promptEmbedding(req.prompt);
    const uncond = promptEmbedding("");
    const grads = new Float64Array(k * h * w);
    for (let f = 0; f < k; f++) {
      const frame = req.frames.subarray(f * h * w, (f + 1) * h * w);
      const small = resize(frame, h, w, res, res);
      // grayscale request -> model channel format, noised per channel
      const z: Float64Array[] = [];
      const eps: Float64Array[] = [];
      for (let c = 0; c < m.channels; c++) {
        const e = new Float64Array(n);
        const zc = new Float64Array(n);
        for (let p = 0; p < n; p++) {
          e[p] = rng.normal();
          zc[p] = alpha * small[p]! + sigma * e[p]!;
        }
        z.push(zc);
        eps.push(e);
      }
      let pred = this.predictNoise(z, tau, emb);
      if (this.cfgScale !== 1.0) {
        const base = this.predictNoise(z, tau, uncond);
        pred = pred.map((ch, c) => {
          const out = new Float64Array(n);
          for (let p = 0; p < n; p++) {
            out[p] = base[c]![p]!
              + this.cfgScale * (ch[p]! - base[c]![p]!);
          }
          return out;
        });
      }
      // channel-mean weighted residual, resampled to request resolution
      const resid = new Float64Array(n);
      for (let p = 0; p < n; p++) {
        let acc = 0;
        for (let c = 0; c < m.channels; c++) {
          acc += pred[c]![p]! - eps[c]![p]!;
        }
        resid[p] = weight * acc / m.channels;
      }
      grads.set(resize(resid, res, res, h, w), f * h * w);
    }
    return { grads, tauUsed: tau };
  }
}
