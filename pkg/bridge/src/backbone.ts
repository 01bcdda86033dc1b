/**
 * Backbone implementations behind the serve loop.
 *
 * A production deployment would adapt a pretrained latent-diffusion model
 * here (prompt conditioning, depth/normal hints, VAE decode). This package
 * ships a deterministic, dependency-free stand-in with the same contract:
 * noise predictions match the latent shape, decoded images come back at 8x
 * the latent resolution in three channels. `loadBackbone` is the single
 * seam where a real model would plug in.
 */

import { BridgeRequest, Tensor, tensorOf } from "./codec.js";

export class BackboneError extends Error {}

export interface Backbone {
  /** Human-readable identity for startup logs. */
  readonly describe: string;
  predictNoise(req: BridgeRequest): Tensor[];
  decodeLatent(req: BridgeRequest): Tensor[];
}

/** Spatial upsampling factor of the decoder; latent HxW becomes 8H x 8W. */
export const DECODE_SCALE = 8;

/** Channel count of decoded images. */
export const DECODE_CHANNELS = 3;

// FNV-1a, reduced to [0, 1). Stable across runs and platforms.
function promptHash(prompt: string, channel: number): number {
  let h = 0x811c9dc5;
  const text = `${prompt}#${channel}`;
  for (let i = 0; i < text.length; i++) {
    h ^= text.charCodeAt(i);
    h = Math.imul(h, 0x01000193);
  }
  return (h >>> 0) / 0x100000000;
}

function checkFinite(tensors: Tensor[], label: string): void {
  for (const t of tensors) {
    for (let i = 0; i < t.data.length; i++) {
      if (!Number.isFinite(t.data[i])) {
        throw new BackboneError(`non-finite ${label} in request`);
      }
    }
  }
}

function channelMean(t: Tensor): number {
  if (t.data.length === 0) {
    return 0;
  }
  let sum = 0;
  for (let i = 0; i < t.data.length; i++) {
    sum += t.data[i];
  }
  return sum / t.data.length;
}

// 3x3 box blur with clamped edges, one channel plane at a time.
function box3(src: Float32Array, h: number, w: number, c: number): Float32Array {
  const out = new Float32Array(src.length);
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      for (let ch = 0; ch < c; ch++) {
        let acc = 0;
        for (let dy = -1; dy <= 1; dy++) {
          for (let dx = -1; dx <= 1; dx++) {
            const yy = Math.min(h - 1, Math.max(0, y + dy));
            const xx = Math.min(w - 1, Math.max(0, x + dx));
            acc += src[(yy * w + xx) * c + ch];
          }
        }
        out[(y * w + x) * c + ch] = acc / 9;
      }
    }
  }
  return out;
}

/**
 * Deterministic toy denoiser.
 *
 * The noise estimate is the high-frequency part of the latent plus a small
 * per-channel bias hashed from the view's prompt and a nudge from the mean
 * of its conditioning image, so prompts and conditioning observably steer
 * the output without any model weights. Non-finite latents are treated as
 * a model failure.
 */
export class ToyBackbone implements Backbone {
  readonly describe: string;

  constructor(readonly device: string = "cpu") {
    this.describe = `toy backbone on ${device}`;
  }

  predictNoise(req: BridgeRequest): Tensor[] {
    checkFinite(req.latents, "latents");
    if (req.conditioning) {
      checkFinite(req.conditioning, "conditioning");
    }
    return req.latents.map((latent, v) => {
      const [h, w, c] = latent.shape;
      const low = box3(latent.data, h, w, c);
      const out = new Float32Array(latent.data.length);
      const condNudge = req.conditioning ? 0.05 * channelMean(req.conditioning[v]) : 0;
      for (let ch = 0; ch < c; ch++) {
        const bias = 0.01 * (promptHash(req.prompts[v], ch) - 0.5) - condNudge;
        for (let i = ch; i < out.length; i += c) {
          out[i] = latent.data[i] - low[i] + bias;
        }
      }
      return tensorOf(latent.shape, out);
    });
  }

  decodeLatent(req: BridgeRequest): Tensor[] {
    checkFinite(req.latents, "latents");
    return req.latents.map((latent) => {
      const [h, w, c] = latent.shape;
      const oh = h * DECODE_SCALE;
      const ow = w * DECODE_SCALE;
      const out = new Float32Array(oh * ow * DECODE_CHANNELS);
      for (let y = 0; y < oh; y++) {
        const sy = Math.floor(y / DECODE_SCALE);
        for (let x = 0; x < ow; x++) {
          const sx = Math.floor(x / DECODE_SCALE);
          for (let ch = 0; ch < DECODE_CHANNELS; ch++) {
            const v = latent.data[(sy * w + sx) * c + (ch % c)];
            // tanh keeps decoded intensities bounded like an image.
            out[(y * ow + x) * DECODE_CHANNELS + ch] = Math.tanh(v);
          }
        }
      }
      return tensorOf([oh, ow, DECODE_CHANNELS], out);
    });
  }
}

/**
 * Resolve a model id to a backbone instance.
 *
 * Only the built-in "toy" id has weights available here; any other id is
 * rejected at startup rather than failing on the first request.
 */
export function loadBackbone(modelId: string, device: string): Backbone {
  if (modelId === "toy") {
    return new ToyBackbone(device);
  }
  throw new BackboneError(`no local weights for model ${JSON.stringify(modelId)}; only "toy" ships with this adapter`);
}
