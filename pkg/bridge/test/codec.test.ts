import { describe, expect, it } from "vitest";

import {
  BridgeRequest,
  BridgeResponse,
  CodecError,
  FrameDecoder,
  OP_DECODE,
  OP_PREDICT,
  PROTOCOL_VERSION,
  Shape3,
  Tensor,
  decodeRequest,
  decodeResponse,
  encodeRequest,
  encodeResponse,
  frame,
  makeRequest,
  makeResponse,
  tensorOf,
} from "../src/codec.js";

// Mulberry32: tiny seeded PRNG so fuzz failures reproduce.
function rng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function randInt(r: () => number, lo: number, hi: number): number {
  return lo + Math.floor(r() * (hi - lo + 1));
}

function pick<T>(r: () => number, items: T[]): T {
  return items[Math.floor(r() * items.length)];
}

const PROMPT_PARTS = ["a clay pot", "mossy stone", "route=66 sign", "χρώμα", "stripes & dots", "x=y=z"];

function randPrompt(r: () => number): string {
  return `${pick(r, PROMPT_PARTS)} ${randInt(r, 0, 999)}`;
}

function randTensor(r: () => number, shape: Shape3): Tensor {
  const data = new Float32Array(shape[0] * shape[1] * shape[2]);
  if (r() < 0.1) {
    // Raw bit patterns: exercises NaN payloads and infinities; the codec
    // must move bytes, not values.
    const bits = new Uint32Array(data.buffer);
    for (let i = 0; i < bits.length; i++) {
      bits[i] = Math.floor(r() * 4294967296);
    }
  } else {
    for (let i = 0; i < data.length; i++) {
      data[i] = (r() - 0.5) * 6;
    }
  }
  return tensorOf(shape, data);
}

function randShape(r: () => number): Shape3 {
  return [randInt(r, 1, 5), randInt(r, 1, 5), randInt(r, 1, 4)];
}

function randRequest(r: () => number): BridgeRequest {
  const views = randInt(r, 1, 4);
  const shape = randShape(r);
  const op = r() < 0.5 ? OP_PREDICT : OP_DECODE;
  const withCond = r() < 0.5;
  const condShape = randShape(r);
  const withSources = r() < 0.7;
  const sources: number[][] = [];
  if (withSources) {
    for (let v = 0; v < views; v++) {
      const row = [v];
      if (r() < 0.5) {
        row.unshift(randInt(r, 0, views - 1));
      }
      sources.push(row);
    }
  }
  const betas = [1.0, 0.25, 1e-8, 1 / 3, -2.75, 6.02e23, 0.1 + 0.2];
  return makeRequest({
    op,
    t: randInt(r, 0, 1000),
    latents: Array.from({ length: views }, () => randTensor(r, shape)),
    prompts: Array.from({ length: views }, () => randPrompt(r)),
    conditioning: withCond ? Array.from({ length: views }, () => randTensor(r, condShape)) : null,
    sources,
    beta: pick(r, betas),
    tRef: randInt(r, 0, 100),
    vRef: randInt(r, 0, views - 1),
  });
}

function randResponse(r: () => number): BridgeResponse {
  if (r() < 0.3) {
    return makeResponse("error", [], `backbone failed: code=${randInt(r, 0, 99)} ${pick(r, PROMPT_PARTS)}`);
  }
  const views = randInt(r, 1, 4);
  const shape = randShape(r);
  return makeResponse("ok", Array.from({ length: views }, () => randTensor(r, shape)));
}

function tensorBytes(t: Tensor): Buffer {
  return Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength);
}

function expectTensorsEqual(got: Tensor[], want: Tensor[]): void {
  expect(got.length).toBe(want.length);
  for (let i = 0; i < got.length; i++) {
    expect(got[i].shape).toEqual(want[i].shape);
    // Byte comparison keeps NaN payloads honest.
    expect(tensorBytes(got[i]).equals(tensorBytes(want[i]))).toBe(true);
  }
}

function expectRequestsEqual(got: BridgeRequest, want: BridgeRequest): void {
  expect(got.op).toBe(want.op);
  expect(got.t).toBe(want.t);
  expect(got.beta).toBe(want.beta);
  expect(got.tRef).toBe(want.tRef);
  expect(got.vRef).toBe(want.vRef);
  expect(got.version).toBe(want.version);
  expect(got.prompts).toEqual(want.prompts);
  expect(got.sources).toEqual(want.sources);
  expectTensorsEqual(got.latents, want.latents);
  expect(got.conditioning === null).toBe(want.conditioning === null);
  if (got.conditioning && want.conditioning) {
    expectTensorsEqual(got.conditioning, want.conditioning);
  }
}

describe("frame fuzz round trip", () => {
  // Top-line transport guarantee: encode then decode is the identity on
  // 10k random frames in each direction.
  it("10k random requests survive encode/decode", () => {
    const r = rng(0xc0de);
    for (let i = 0; i < 10_000; i++) {
      const req = randRequest(r);
      expectRequestsEqual(decodeRequest(encodeRequest(req)), req);
    }
  });

  it("10k random responses survive encode/decode", () => {
    const r = rng(0xfade);
    for (let i = 0; i < 10_000; i++) {
      const resp = randResponse(r);
      const got = decodeResponse(encodeResponse(resp));
      expect(got.status).toBe(resp.status);
      expect(got.error).toBe(resp.error);
      expect(got.version).toBe(resp.version);
      expectTensorsEqual(got.tensors, resp.tensors);
    }
  });
});

describe("header details", () => {
  const base = () =>
    makeRequest({
      op: OP_PREDICT,
      t: 7,
      latents: [tensorOf([2, 3, 1])],
      prompts: ["pot, front view"],
    });

  it("prompts keep '=' and unicode intact", () => {
    const req = base();
    req.prompts = ["a=b=c χ"];
    expect(decodeRequest(encodeRequest(req)).prompts[0]).toBe("a=b=c χ");
  });

  it("error text keeps '=' intact", () => {
    const resp = makeResponse("error", [], "bad shape=3x3x3");
    expect(decodeResponse(encodeResponse(resp)).error).toBe("bad shape=3x3x3");
  });

  it("empty sources field round-trips to an empty list", () => {
    const req = base();
    req.sources = [];
    expect(decodeRequest(encodeRequest(req)).sources).toEqual([]);
  });

  it("beta exponent forms parse exactly", () => {
    for (const beta of [1e-8, 2 ** -40, 123456789.125]) {
      const req = base();
      req.beta = beta;
      expect(decodeRequest(encodeRequest(req)).beta).toBe(beta);
    }
  });

  it("python-style float spellings parse", () => {
    // The engine writes repr() floats like "1e-08"; accept its spellings.
    const payload = encodeRequest(base()).toString("latin1").replace("beta=1", "beta=1e-08");
    const req = decodeRequest(Buffer.from(payload, "latin1"));
    expect(req.beta).toBe(1e-8);
  });
});

describe("malformed frames are rejected", () => {
  const good = () =>
    makeRequest({
      op: OP_PREDICT,
      t: 3,
      latents: [tensorOf([2, 2, 2]), tensorOf([2, 2, 2])],
      prompts: ["a, front view", "a, back view"],
    });

  function corrupt(mutate: (text: string) => string): Buffer {
    const payload = encodeRequest(good());
    const sep = payload.indexOf("\n\n");
    const head = mutate(payload.subarray(0, sep).toString("utf-8"));
    return Buffer.concat([Buffer.from(head + "\n\n", "utf-8"), payload.subarray(sep + 2)]);
  }

  it("missing header terminator", () => {
    expect(() => decodeRequest(Buffer.from("type=request\nversion=1\n"))).toThrow(/terminator/);
  });

  it("header line without '='", () => {
    expect(() => decodeRequest(corrupt((h) => h + "\njunkline"))).toThrow(/malformed header line/);
  });

  it("wrong frame type", () => {
    expect(() => decodeRequest(corrupt((h) => h.replace("type=request", "type=response")))).toThrow(/not a request/);
    const resp = encodeResponse(makeResponse("ok", [tensorOf([1, 1, 1])]));
    expect(() => decodeRequest(resp)).toThrow(/not a request/);
  });

  it("unsupported version", () => {
    expect(() => decodeRequest(corrupt((h) => h.replace("version=1", "version=9")))).toThrow(/version 9/);
    expect(PROTOCOL_VERSION).toBe(1);
  });

  it("truncated tensor body", () => {
    const payload = encodeRequest(good());
    expect(() => decodeRequest(payload.subarray(0, payload.length - 5))).toThrow(/shorter than declared/);
  });

  it("trailing junk after tensors", () => {
    const payload = encodeRequest(good());
    expect(() => decodeRequest(Buffer.concat([payload, Buffer.from([1, 2, 3, 4])]))).toThrow(/longer than declared/);
  });

  it("bad shape fields", () => {
    for (const bad of ["2x2", "2x0x2", "axbxc", "2x2x2x2", "-1x2x2"]) {
      expect(() => decodeRequest(corrupt((h) => h.replace("shape=2x2x2", `shape=${bad}`)))).toThrow(CodecError);
    }
  });

  it("missing prompt for declared view", () => {
    expect(() => decodeRequest(corrupt((h) => h.replace("prompt.1=a, back view", "prompt_1=x")))).toThrow(/prompt.1/);
  });

  it("unknown op", () => {
    expect(() => decodeRequest(corrupt((h) => h.replace("op=predict-noise", "op=transmogrify")))).toThrow(/unknown op/);
  });

  it("empty prompt on predict", () => {
    expect(() => decodeRequest(corrupt((h) => h.replace("prompt.1=a, back view", "prompt.1=")))).toThrow(/non-empty/);
  });

  it("sources not covering every view", () => {
    expect(() => decodeRequest(corrupt((h) => h.replace("sources=", "sources=0,1")))).toThrow(/cover every view/);
  });

  it("response with unknown status", () => {
    const payload = encodeResponse(makeResponse("error", [], "x"));
    const text = payload.toString("utf-8").replace("status=error", "status=maybe");
    expect(() => decodeResponse(Buffer.from(text, "utf-8"))).toThrow(/unknown status/);
  });

  it("ok response without tensors", () => {
    expect(() => encodeResponse(makeResponse("ok"))).toThrow(/must carry tensors/);
    const payload = encodeResponse(makeResponse("error", [], "x"));
    const text = payload.toString("utf-8").replace("status=error", "status=ok");
    expect(() => decodeResponse(Buffer.from(text, "utf-8"))).toThrow(/must carry tensors/);
  });

  it("validation rejects mixed latent shapes before encoding", () => {
    const req = good();
    req.latents = [tensorOf([2, 2, 2]), tensorOf([2, 2, 1])];
    expect(() => encodeRequest(req)).toThrow(/share one/);
  });

  it("newlines in prompts are rejected", () => {
    const req = good();
    req.prompts = ["ok", "bad\nprompt"];
    expect(() => encodeRequest(req)).toThrow(/newlines/);
  });
});

describe("length-prefixed stream decoding", () => {
  it("reassembles frames split at arbitrary byte boundaries", () => {
    const r = rng(0xbeef);
    const payloads = Array.from({ length: 20 }, () => encodeRequest(randRequest(r)));
    const stream = Buffer.concat(payloads.map((p) => frame(p)));
    const decoder = new FrameDecoder();
    const got: Buffer[] = [];
    let offset = 0;
    while (offset < stream.length) {
      const step = Math.min(stream.length - offset, randInt(r, 1, 7));
      got.push(...decoder.push(stream.subarray(offset, offset + step)));
      offset += step;
    }
    expect(got.length).toBe(payloads.length);
    for (let i = 0; i < got.length; i++) {
      expect(got[i].equals(payloads[i])).toBe(true);
    }
  });

  it("empty and back-to-back frames arrive in order", () => {
    const decoder = new FrameDecoder();
    const frames = decoder.push(Buffer.concat([frame(Buffer.from("a")), frame(Buffer.alloc(0)), frame(Buffer.from("bc"))]));
    expect(frames.map((f) => f.toString())).toEqual(["a", "", "bc"]);
  });

  it("a declared length beyond the cap throws", () => {
    const decoder = new FrameDecoder(1024);
    const prefix = Buffer.alloc(4);
    prefix.writeUInt32LE(1 << 30, 0);
    expect(() => decoder.push(prefix)).toThrow(/exceeds limit/);
  });
});
