/**
 * Frame codec for the texture-engine wire protocol.
 *
 * Frame layout, both directions:
 *
 *     4-byte little-endian unsigned length N
 *     N bytes of payload:
 *         UTF-8 header, one "key=value" per line, terminated by a blank line
 *         raw little-endian float32 tensor data, concatenated in view order
 *
 * Tensor dimensions ride in the header as base-10 "HxWxC" strings. Header
 * values must not contain newlines; the first "=" splits key from value, so
 * values may contain "=". This module must stay bit-exact with the engine's
 * Python codec: same keys, same field formats, same validation rules.
 */

import * as os from "node:os";

// Tensor payloads are reinterpreted through typed arrays, which use the
// platform byte order. The protocol is little-endian on the wire.
if (os.endianness() !== "LE") {
  throw new Error("this codec requires a little-endian host");
}

export const PROTOCOL_VERSION = 1;

export const OP_PREDICT = "predict-noise";
export const OP_DECODE = "decode-latent";
const OPS = [OP_PREDICT, OP_DECODE];

export type Shape3 = readonly [number, number, number];

/** Dense float32 tensor in row-major (H, W, C) layout. */
export interface Tensor {
  shape: Shape3;
  data: Float32Array;
}

export class CodecError extends Error {}

export function tensorOf(shape: Shape3, data?: Float32Array): Tensor {
  const size = shape[0] * shape[1] * shape[2];
  const buf = data ?? new Float32Array(size);
  if (buf.length !== size) {
    throw new CodecError(`tensor data length ${buf.length} does not match shape ${fmtShape(shape)}`);
  }
  return { shape, data: buf };
}

function sameShape(a: Shape3, b: Shape3): boolean {
  return a[0] === b[0] && a[1] === b[1] && a[2] === b[2];
}

/** One engine call: all view latents plus everything the backbone needs. */
export interface BridgeRequest {
  op: string;
  t: number;
  latents: Tensor[];
  prompts: string[];
  conditioning: Tensor[] | null;
  sources: number[][];
  beta: number;
  tRef: number;
  vRef: number;
  version: number;
}

/** Backbone reply: per-view tensors on ok, error text otherwise. */
export interface BridgeResponse {
  status: string; // ok | error
  tensors: Tensor[];
  error: string;
  version: number;
}

export function makeRequest(fields: Partial<BridgeRequest> & Pick<BridgeRequest, "op" | "t" | "latents" | "prompts">): BridgeRequest {
  return {
    conditioning: null,
    sources: [],
    beta: 1.0,
    tRef: 0,
    vRef: 0,
    version: PROTOCOL_VERSION,
    ...fields,
  };
}

export function makeResponse(status: string, tensors: Tensor[] = [], error = ""): BridgeResponse {
  return { status, tensors, error, version: PROTOCOL_VERSION };
}

export function validateRequest(req: BridgeRequest): void {
  if (!OPS.includes(req.op)) {
    throw new CodecError(`unknown op: ${req.op}`);
  }
  if (req.latents.length === 0) {
    throw new CodecError("request carries no views");
  }
  const shape = req.latents[0].shape;
  for (const t of req.latents) {
    if (!sameShape(t.shape, shape)) {
      throw new CodecError("all view latents must share one (H, W, C) shape");
    }
  }
  if (req.prompts.length !== req.latents.length) {
    throw new CodecError("one prompt per view required");
  }
  if (req.op === OP_PREDICT && req.prompts.some((p) => p.length === 0)) {
    throw new CodecError("prompts must be non-empty for predict ops");
  }
  for (const p of req.prompts) {
    if (p.includes("\n")) {
      throw new CodecError("prompts must not contain newlines");
    }
  }
  if (req.conditioning !== null) {
    if (req.conditioning.length !== req.latents.length) {
      throw new CodecError("one conditioning image per view required");
    }
    const cshape = req.conditioning[0].shape;
    for (const c of req.conditioning) {
      if (!sameShape(c.shape, cshape)) {
        throw new CodecError("conditioning images must share one (H, W, C) shape");
      }
    }
  }
  if (req.sources.length > 0 && req.sources.length !== req.latents.length) {
    throw new CodecError("attention sources must cover every view");
  }
}

export function validateResponse(resp: BridgeResponse): void {
  if (resp.status !== "ok" && resp.status !== "error") {
    throw new CodecError(`unknown status: ${resp.status}`);
  }
  if (resp.status === "ok" && resp.tensors.length === 0) {
    throw new CodecError("ok response must carry tensors");
  }
  if (resp.error.includes("\n")) {
    throw new CodecError("error text must not contain newlines");
  }
}

// ---------------------------------------------------------------------------
// Header field formats

function fmtShape(shape: Shape3): string {
  return shape.map((d) => String(d)).join("x");
}

function parseShape(text: string): Shape3 {
  const dims = text.split("x").map((d) => parseIntStrict(d, `bad shape field: ${JSON.stringify(text)}`));
  if (dims.length !== 3 || dims.some((d) => d <= 0)) {
    throw new CodecError(`bad shape field: ${JSON.stringify(text)}`);
  }
  return [dims[0], dims[1], dims[2]];
}

function parseIntStrict(text: string, message?: string): number {
  if (!/^[+-]?\d+$/.test(text.trim())) {
    throw new CodecError(message ?? `not an integer: ${JSON.stringify(text)}`);
  }
  return parseInt(text, 10);
}

function parseFloatStrict(text: string): number {
  const value = Number(text.trim());
  if (Number.isNaN(value) && text.trim().toLowerCase() !== "nan") {
    throw new CodecError(`not a float: ${JSON.stringify(text)}`);
  }
  return value;
}

// JS shortest round-trip float formatting; Python's parser accepts every
// string this produces, including exponent forms.
function fmtFloat(value: number): string {
  return String(value);
}

function fmtSources(sources: number[][]): string {
  return sources.map((row) => row.map((s) => String(s)).join(",")).join(";");
}

function parseSources(text: string): number[][] {
  return text
    .split(";")
    .filter((row) => row.length > 0)
    .map((row) => row.split(",").map((s) => parseIntStrict(s, `bad sources field: ${JSON.stringify(text)}`)));
}

// ---------------------------------------------------------------------------
// Payload assembly / splitting

function tensorBytes(t: Tensor): Buffer {
  return Buffer.from(t.data.buffer, t.data.byteOffset, t.data.byteLength);
}

function assemble(header: string[], tensors: Tensor[]): Buffer {
  const head = Buffer.from(header.join("\n") + "\n\n", "utf-8");
  return Buffer.concat([head, ...tensors.map(tensorBytes)]);
}

function splitPayload(payload: Buffer): { fields: Map<string, string>; body: Buffer } {
  const sep = payload.indexOf("\n\n");
  if (sep < 0) {
    throw new CodecError("frame has no header terminator");
  }
  const fields = new Map<string, string>();
  for (const line of payload.subarray(0, sep).toString("utf-8").split("\n")) {
    if (line.length === 0) {
      continue;
    }
    const eq = line.indexOf("=");
    if (eq < 0) {
      throw new CodecError(`malformed header line: ${JSON.stringify(line)}`);
    }
    fields.set(line.slice(0, eq), line.slice(eq + 1));
  }
  return { fields, body: payload.subarray(sep + 2) };
}

function takeTensors(body: Buffer, count: number, shape: Shape3, offset: number): { tensors: Tensor[]; offset: number } {
  const size = shape[0] * shape[1] * shape[2] * 4;
  const tensors: Tensor[] = [];
  for (let i = 0; i < count; i++) {
    if (offset + size > body.length) {
      throw new CodecError("frame payload shorter than declared tensors");
    }
    // Copy out of the frame buffer so tensors own aligned storage.
    const copy = new Uint8Array(size);
    copy.set(body.subarray(offset, offset + size));
    tensors.push({ shape, data: new Float32Array(copy.buffer) });
    offset += size;
  }
  return { tensors, offset };
}

function requireField(fields: Map<string, string>, key: string): string {
  const value = fields.get(key);
  if (value === undefined) {
    throw new CodecError(`frame header missing ${JSON.stringify(key)}`);
  }
  return value;
}

function checkVersion(fields: Map<string, string>): number {
  const version = parseIntStrict(requireField(fields, "version"));
  if (version !== PROTOCOL_VERSION) {
    throw new CodecError(`unsupported protocol version ${version}`);
  }
  return version;
}

// ---------------------------------------------------------------------------
// Request / response payloads (no length prefix)

export function encodeRequest(req: BridgeRequest): Buffer {
  validateRequest(req);
  const header = [
    "type=request",
    `version=${req.version}`,
    `op=${req.op}`,
    `t=${req.t}`,
    `views=${req.latents.length}`,
    `shape=${fmtShape(req.latents[0].shape)}`,
    "cond_shape=" + (req.conditioning ? fmtShape(req.conditioning[0].shape) : "none"),
    `beta=${fmtFloat(req.beta)}`,
    `t_ref=${req.tRef}`,
    `v_ref=${req.vRef}`,
    `sources=${fmtSources(req.sources)}`,
  ];
  for (let i = 0; i < req.prompts.length; i++) {
    header.push(`prompt.${i}=${req.prompts[i]}`);
  }
  return assemble(header, req.latents.concat(req.conditioning ?? []));
}

export function decodeRequest(payload: Buffer): BridgeRequest {
  const { fields, body } = splitPayload(payload);
  if (requireField(fields, "type") !== "request") {
    throw new CodecError("frame is not a request");
  }
  const version = checkVersion(fields);
  const views = parseIntStrict(requireField(fields, "views"));
  const shape = parseShape(requireField(fields, "shape"));
  const condField = requireField(fields, "cond_shape");
  let { tensors: latents, offset } = takeTensors(body, views, shape, 0);
  let conditioning: Tensor[] | null = null;
  if (condField !== "none") {
    const taken = takeTensors(body, views, parseShape(condField), offset);
    conditioning = taken.tensors;
    offset = taken.offset;
  }
  if (offset !== body.length) {
    throw new CodecError("frame payload longer than declared tensors");
  }
  const prompts: string[] = [];
  for (let i = 0; i < views; i++) {
    prompts.push(requireField(fields, `prompt.${i}`));
  }
  const req: BridgeRequest = {
    op: requireField(fields, "op"),
    t: parseIntStrict(requireField(fields, "t")),
    latents,
    prompts,
    conditioning,
    sources: parseSources(requireField(fields, "sources")),
    beta: parseFloatStrict(requireField(fields, "beta")),
    tRef: parseIntStrict(requireField(fields, "t_ref")),
    vRef: parseIntStrict(requireField(fields, "v_ref")),
    version,
  };
  validateRequest(req);
  return req;
}

export function encodeResponse(resp: BridgeResponse): Buffer {
  validateResponse(resp);
  const header = [
    "type=response",
    `version=${resp.version}`,
    `status=${resp.status}`,
    `views=${resp.tensors.length}`,
    "shape=" + (resp.tensors.length > 0 ? fmtShape(resp.tensors[0].shape) : "none"),
    `error=${resp.error}`,
  ];
  return assemble(header, resp.tensors);
}

export function decodeResponse(payload: Buffer): BridgeResponse {
  const { fields, body } = splitPayload(payload);
  if (requireField(fields, "type") !== "response") {
    throw new CodecError("frame is not a response");
  }
  const version = checkVersion(fields);
  const views = parseIntStrict(requireField(fields, "views"));
  const shapeField = requireField(fields, "shape");
  let tensors: Tensor[] = [];
  let offset = 0;
  if (shapeField !== "none") {
    ({ tensors, offset } = takeTensors(body, views, parseShape(shapeField), 0));
  }
  if (offset !== body.length) {
    throw new CodecError("frame payload longer than declared tensors");
  }
  const resp: BridgeResponse = {
    status: requireField(fields, "status"),
    tensors,
    error: fields.get("error") ?? "",
    version,
  };
  validateResponse(resp);
  return resp;
}

// ---------------------------------------------------------------------------
// Length-prefixed framing

/** Prepend the 4-byte little-endian length prefix to one payload. */
export function frame(payload: Buffer): Buffer {
  const prefix = Buffer.alloc(4);
  prefix.writeUInt32LE(payload.length, 0);
  return Buffer.concat([prefix, payload]);
}

/**
 * Incremental parser for a stream of length-prefixed frames.
 *
 * Feed raw socket chunks; complete payloads come back in arrival order.
 * A declared length beyond `maxFrameBytes` throws, because the stream can
 * no longer be resynchronized after a corrupt prefix.
 */
export class FrameDecoder {
  private pending: Buffer = Buffer.alloc(0);

  constructor(readonly maxFrameBytes: number = 1 << 28) {}

  push(chunk: Buffer): Buffer[] {
    this.pending = this.pending.length === 0 ? chunk : Buffer.concat([this.pending, chunk]);
    const frames: Buffer[] = [];
    while (this.pending.length >= 4) {
      const length = this.pending.readUInt32LE(0);
      if (length > this.maxFrameBytes) {
        throw new CodecError(`frame length ${length} exceeds limit ${this.maxFrameBytes}`);
      }
      if (this.pending.length < 4 + length) {
        break;
      }
      frames.push(this.pending.subarray(4, 4 + length));
      this.pending = this.pending.subarray(4 + length);
    }
    return frames;
  }
}
