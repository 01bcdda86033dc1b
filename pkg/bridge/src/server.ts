/**
 * TCP service exposing a backbone through the wire protocol.
 *
 * Each connection carries length-prefixed frames; requests on one
 * connection are handled strictly in arrival order, one in flight at a
 * time. A malformed frame produces an error response and the connection
 * stays open; only a corrupt length prefix (stream no longer
 * resynchronizable) closes it.
 */

import * as net from "node:net";

import { Backbone, BackboneError, ToyBackbone } from "./backbone.js";
import {
  BridgeRequest,
  BridgeResponse,
  FrameDecoder,
  OP_DECODE,
  OP_PREDICT,
  decodeRequest,
  encodeResponse,
  frame,
  makeResponse,
} from "./codec.js";

export interface ServeOptions {
  backbone?: Backbone;
  /** Echo mode: respond to every op with the request latents, verbatim. */
  echo?: boolean;
  maxFrameBytes?: number;
  log?: (line: string) => void;
}

export interface BridgeServer {
  host: string;
  port: number;
  address: string;
  close(): Promise<void>;
}

/** Split "host:port"; a bare port binds the loopback interface. */
export function parseAddress(address: string): { host: string; port: number } {
  const colon = address.lastIndexOf(":");
  const host = colon < 0 ? "" : address.slice(0, colon);
  const portText = colon < 0 ? address : address.slice(colon + 1);
  const port = Number(portText);
  if (!Number.isInteger(port) || port < 0 || port > 65535) {
    throw new Error(`bad listen address ${JSON.stringify(address)}, expected host:port`);
  }
  return { host: host || "127.0.0.1", port };
}

function handleRequest(req: BridgeRequest, backbone: Backbone, echo: boolean): BridgeResponse {
  if (echo) {
    return makeResponse("ok", req.latents);
  }
  if (req.op === OP_PREDICT) {
    return makeResponse("ok", backbone.predictNoise(req));
  }
  if (req.op === OP_DECODE) {
    return makeResponse("ok", backbone.decodeLatent(req));
  }
  // decodeRequest already rejects unknown ops; kept for defense in depth.
  return makeResponse("error", [], `unsupported op: ${req.op}`);
}

function handleFrame(payload: Buffer, backbone: Backbone, echo: boolean): BridgeResponse {
  let req: BridgeRequest;
  try {
    req = decodeRequest(payload);
  } catch (err) {
    return makeResponse("error", [], `malformed frame: ${message(err)}`);
  }
  try {
    return handleRequest(req, backbone, echo);
  } catch (err) {
    if (err instanceof BackboneError) {
      return makeResponse("error", [], `backbone error: ${message(err)}`);
    }
    throw err;
  }
}

function message(err: unknown): string {
  const text = err instanceof Error ? err.message : String(err);
  return text.replace(/\n/g, " ");
}

/** Bind the service and resolve once it is accepting connections. */
export function serve(listen: string, options: ServeOptions = {}): Promise<BridgeServer> {
  const { host, port } = parseAddress(listen);
  const backbone = options.backbone ?? new ToyBackbone();
  const echo = options.echo ?? false;
  const log = options.log ?? (() => {});

  const connections = new Set<net.Socket>();
  const server = net.createServer((socket) => {
    connections.add(socket);
    socket.on("close", () => connections.delete(socket));
    const decoder = new FrameDecoder(options.maxFrameBytes);
    socket.on("data", (chunk) => {
      let payloads: Buffer[];
      try {
        payloads = decoder.push(chunk);
      } catch (err) {
        // Framing lost: report once, flush, then drop the connection.
        socket.end(frame(encodeResponse(makeResponse("error", [], `unframeable stream: ${message(err)}`))));
        return;
      }
      for (const payload of payloads) {
        let resp: BridgeResponse;
        try {
          resp = handleFrame(payload, backbone, echo);
        } catch (err) {
          resp = makeResponse("error", [], `internal error: ${message(err)}`);
        }
        socket.write(frame(encodeResponse(resp)));
      }
    });
    socket.on("error", () => socket.destroy());
  });

  return new Promise((resolve, reject) => {
    server.once("error", reject);
    server.listen(port, host, () => {
      const bound = server.address() as net.AddressInfo;
      const info: BridgeServer = {
        host: bound.address,
        port: bound.port,
        address: `${bound.address}:${bound.port}`,
        close: () =>
          new Promise((done, fail) => {
            // Live connections hold the server open; drop them first.
            for (const sock of connections) {
              sock.destroy();
            }
            server.close((err) => (err ? fail(err) : done()));
          }),
      };
      log(`${echo ? "echo" : backbone.describe} listening on ${info.address}`);
      resolve(info);
    });
  });
}
